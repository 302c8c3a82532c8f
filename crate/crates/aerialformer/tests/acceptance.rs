//! End-to-end acceptance checks. Each test prints one PASS/FAIL line for
//! its criterion (visible with `--nocapture`; the harness reports failures
//! either way).

mod common;

use std::panic::AssertUnwindSafe;
use std::rc::Rc;

use rand::Rng;

use aerialformer::data::make_synthetic;
use aerialformer::decoder::{dilation_for, kernel_for, receptive_field};
use aerialformer::encoder::{
    shift_attention_mask, shift_region_ids, window_partition_index, window_reverse_index,
    EncoderConfig, SwinEncoder, WindowAttention, MASK_NEG,
};
use aerialformer::metrics::{confusion, metrics};
use aerialformer::model::{AerialFormer, ModelConfig, RF_SCHEDULE};
use aerialformer::params::{seeded_rng, Binder, ParamStore};
use aerialformer::tensor::{Tape, Tensor};
use aerialformer::tiling::{infer_image, make_grid, stitch};
use aerialformer::train::{train_loop, TrainConfig};

fn criterion(n: usize, name: &str, f: impl FnOnce()) {
    match std::panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("criterion {n:>2} [{name}]: PASS"),
        Err(e) => {
            println!("criterion {n:>2} [{name}]: FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

/// Deterministic pseudo-random values in roughly [-1, 1].
fn filled(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ── criterion 1: finite-difference gradient suite ────────────────────

/// Fixed coefficients that turn any output into a scalar objective.
fn mix_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 37 % 17) as f64) / 17.0 + 0.5).collect()
}

type Build = dyn for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Tensor<'t>;

/// Run one op through AD and central differences on every coordinate of
/// every input.
fn check_op(name: &str, inputs: &[(Vec<f64>, Vec<usize>)], build: &Build) {
    let eval = |xs: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = xs
            .iter()
            .zip(inputs)
            .map(|(x, (_, shape))| tape.leaf(x.clone(), shape.clone()))
            .collect();
        let out = build(&tape, &leaves);
        let n = out.shape().iter().product();
        let w = tape.constant(mix_weights(n), out.shape());
        out.mul(w).unwrap().sum().item()
    };

    // analytic gradients, one pass
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(x, shape)| tape.leaf(x.clone(), shape.clone()))
        .collect();
    let out = build(&tape, &leaves);
    let n = out.shape().iter().product();
    let w = tape.constant(mix_weights(n), out.shape());
    out.mul(w).unwrap().sum().backward().unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(x, _)| x.clone()).collect();
    for (j, leaf) in leaves.iter().enumerate() {
        let grad = leaf
            .grad()
            .unwrap_or_else(|| panic!("{name}: input {j} has no gradient"));
        let f = |x: &[f64]| {
            let mut xs = base.clone();
            xs[j] = x.to_vec();
            eval(&xs)
        };
        let coords: Vec<usize> = (0..base[j].len()).collect();
        common::assert_grad_matches(
            &format!("{name} input {j}"),
            &f,
            &base[j],
            &grad,
            &coords,
            1e-4,
        );
    }
}

fn single_op_suite() {
    let a = (filled(24, 1), vec![2, 3, 4]);
    let b = (filled(24, 2), vec![2, 3, 4]);
    check_op("add", &[a.clone(), b.clone()], &|_, t| t[0].add(t[1]).unwrap());
    check_op("mul", &[a.clone(), b.clone()], &|_, t| t[0].mul(t[1]).unwrap());
    check_op("scale", &[a.clone()], &|_, t| t[0].scale(-1.7));
    check_op("sum", &[a.clone()], &|_, t| t[0].sum());
    check_op("mean", &[a.clone()], &|_, t| t[0].mean());
    check_op("gelu", &[a.clone()], &|_, t| t[0].gelu());
    check_op(
        "add_bias_last",
        &[a.clone(), (filled(4, 3), vec![4])],
        &|_, t| t[0].add_bias_last(t[1]).unwrap(),
    );
    // keep relu inputs away from the kink at 0
    let relu_in: Vec<f64> = filled(24, 4)
        .into_iter()
        .map(|v| if v.abs() < 0.2 { v + 0.5 } else { v })
        .collect();
    check_op("relu", &[(relu_in, vec![2, 3, 4])], &|_, t| t[0].relu());
    check_op(
        "matmul [2,3,4]x[4,5]",
        &[a.clone(), (filled(20, 5), vec![4, 5])],
        &|_, t| t[0].matmul(t[1]).unwrap(),
    );
    check_op(
        "matmul batched b",
        &[a.clone(), (filled(40, 6), vec![2, 4, 5])],
        &|_, t| t[0].matmul(t[1]).unwrap(),
    );
    check_op("softmax", &[a.clone()], &|_, t| t[0].softmax(2).unwrap());
    check_op(
        "layer_norm",
        &[a.clone(), (filled(4, 7), vec![4]), (filled(4, 8), vec![4])],
        &|_, t| t[0].layer_norm(t[1], t[2], 1e-6).unwrap(),
    );
    let img = (filled(2 * 3 * 36, 9), vec![2, 3, 6, 6]);
    check_op(
        "batch_norm",
        &[img.clone(), (filled(3, 10), vec![3]), (filled(3, 11), vec![3])],
        &|_, t| t[0].batch_norm_train(t[1], t[2], 1e-5).unwrap().0,
    );
    check_op(
        "conv2d s2 p1 d1",
        &[img.clone(), (filled(2 * 3 * 9, 12), vec![2, 3, 3, 3]), (filled(2, 13), vec![2])],
        &|_, t| t[0].conv2d(t[1], Some(t[2]), 2, 1, 1).unwrap(),
    );
    check_op(
        "conv2d s1 p2 d2",
        &[img.clone(), (filled(2 * 3 * 9, 14), vec![2, 3, 3, 3])],
        &|_, t| t[0].conv2d(t[1], None, 1, 2, 2).unwrap(),
    );
    check_op(
        "conv_transpose2d",
        &[img.clone(), (filled(3 * 2 * 4, 15), vec![3, 2, 2, 2]), (filled(2, 16), vec![2])],
        &|_, t| t[0].conv_transpose2d(t[1], Some(t[2]), 2).unwrap(),
    );
    check_op("permute+reshape", &[a.clone()], &|_, t| {
        t[0].permute(&[2, 0, 1]).unwrap().reshape(&[4, 6]).unwrap()
    });
    check_op("gather repeated", &[(filled(6, 17), vec![6])], &|_, t| {
        t[0].gather(Rc::new(vec![0, 2, 2, 5, 1, 1, 1, 4]), &[2, 4]).unwrap()
    });
    check_op("concat", &[a.clone(), (filled(16, 18), vec![2, 2, 4])], &|_, t| {
        aerialformer::tensor::ops::concat(&[t[0], t[1]], 1).unwrap()
    });
    let targets = vec![0i64, 2, 255, 1, 1, 0];
    check_op(
        "cross_entropy",
        &[(filled(6 * 3, 19), vec![1, 3, 2, 3])],
        &move |_, t| t[0].cross_entropy(&targets, 255).unwrap(),
    );
}

fn toy_model_grad_check() {
    let cfg = ModelConfig::toy(2, 2, [1, 1, 1, 1], 2).unwrap();
    let model = AerialFormer::new(cfg).unwrap();
    let store = model.init_params(5);
    let total: usize = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.numel())
        .sum();
    assert!(total <= 10_000, "toy model has {total} params");

    let image = filled(3 * 64 * 64, 20).iter().map(|v| v * 0.5 + 0.5).collect::<Vec<_>>();
    let mut rng = seeded_rng(21);
    let target: Vec<i64> = (0..64 * 64)
        .map(|_| if rng.gen_bool(0.05) { 255 } else { rng.gen_range(0..2) })
        .collect();

    let eval_loss = || -> f64 {
        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let x = tape.constant(image.clone(), vec![1, 3, 64, 64]);
        let logits = model.forward(&binder, &store, x, true).unwrap();
        logits.cross_entropy(&target, 255).unwrap().item()
    };

    // analytic gradients once
    let grads = {
        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let x = tape.constant(image.clone(), vec![1, 3, 64, 64]);
        let logits = model.forward(&binder, &store, x, true).unwrap();
        logits.cross_entropy(&target, 255).unwrap().backward().unwrap();
        binder.grads()
    };

    let paths: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(path, _)| path.clone())
        .collect();
    let h = common::FD_STEP;
    for path in paths {
        let g = grads[&path]
            .as_ref()
            .unwrap_or_else(|| panic!("no gradient for {path}"));
        let len = store.get(&path).numel();
        // two spot coordinates per tensor keep the sweep under the budget
        let coords = if len == 1 { vec![0] } else { vec![0, 1 + (len - 1) / 2] };
        for i in coords {
            let orig = store.get(&path).data.borrow()[i];
            store.get(&path).data.borrow_mut()[i] = orig + h;
            let lp = eval_loss();
            store.get(&path).data.borrow_mut()[i] = orig - h;
            let lm = eval_loss();
            store.get(&path).data.borrow_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = common::rel_err(g[i], fd);
            assert!(
                err < 1e-3,
                "{path}[{i}]: analytic {} vs fd {fd}, rel err {err:.3e}",
                g[i]
            );
        }
    }
}

#[test]
fn c01_gradient_suite() {
    criterion(1, "finite-difference gradients", || {
        let start = std::time::Instant::now();
        single_op_suite();
        toy_model_grad_check();
        assert!(
            start.elapsed().as_secs() < 300,
            "gradient suite took {:?}",
            start.elapsed()
        );
    });
}

// ── criterion 2: shape contract ──────────────────────────────────────

#[test]
fn c02_shape_contract() {
    criterion(2, "encoder/model shape contract", || {
        let c = 32;
        let cfg = EncoderConfig {
            patch_size: 4,
            embed_dim: c,
            window: 4,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            ffn_expansion: 1,
        };
        let enc = SwinEncoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut seeded_rng(0));
        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let img = tape.constant(filled(3 * 64 * 64, 0), vec![1, 3, 64, 64]);
        let feats = enc.encode(&binder, &store, img).unwrap();
        let expect = [(16, 16, c), (8, 8, 2 * c), (4, 4, 4 * c), (2, 2, 8 * c)];
        for (f, (h, w, d)) in feats.iter().zip(expect) {
            assert_eq!(f.shape(), vec![1, h, w, d]);
        }

        let model = AerialFormer::new(ModelConfig::toy(8, 4, [1, 2, 2, 2], 5).unwrap()).unwrap();
        let mstore = model.init_params(1);
        let tape = Tape::new(); // binders cache by path, so each store gets its own
        let binder = Binder::new(&tape);
        let img = tape.constant(filled(2 * 3 * 64 * 64, 1), vec![2, 3, 64, 64]);
        let logits = model.forward(&binder, &mstore, img, true).unwrap();
        assert_eq!(logits.shape(), vec![2, 5, 64, 64]);
    });
}

// ── criterion 3: WSA ≡ global attention ──────────────────────────────

#[test]
fn c03_wsa_equals_global_attention() {
    criterion(3, "WSA matches global MHSA", || {
        let (d, heads, m) = (8, 2, 3);
        let n = m * m;
        let wsa = WindowAttention {
            prefix: "wsa".into(),
            dim: d,
            heads,
            window: m,
            table_window: m,
        };
        let mut store = ParamStore::new();
        wsa.init(&mut store, &mut seeded_rng(7));
        // give the biases some life, then silence the relative bias table
        for name in ["q", "k", "v", "proj"] {
            store.set_data(&format!("wsa.{name}.bias"), filled(d, 30));
        }
        let side = 2 * m - 1;
        store.set_data("wsa.rel_bias", vec![0.0; heads * side * side]);

        let x = filled(n * d, 31);
        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let xt = tape.constant(x.clone(), vec![1, n, d]);
        let ours = wsa.forward(&binder, &store, xt, None).unwrap().to_vec();

        let get = |p: &str| store.get(p).data.borrow().clone();
        let reference = common::global_mhsa(
            &x,
            n,
            d,
            heads,
            &get("wsa.q.weight"),
            &get("wsa.q.bias"),
            &get("wsa.k.weight"),
            &get("wsa.k.bias"),
            &get("wsa.v.weight"),
            &get("wsa.v.bias"),
            &get("wsa.proj.weight"),
            &get("wsa.proj.bias"),
        );
        for (a, b) in ours.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    });
}

// ── criterion 4: shifted-window masking and partition round-trip ─────

#[test]
fn c04_shift_mask_and_partition() {
    criterion(4, "shift mask zeros + partition bijection", || {
        let (h, w, m) = (8, 8, 4);
        let s = m / 2;
        let mask = shift_attention_mask(h, w, m, s);
        let regions = shift_region_ids(h, w, m, s);
        let nw = (h / m) * (w / m);
        let mm = m * m;
        assert_eq!(mask.len(), nw * mm * mm);

        // token order inside each window, as the partition emits it
        let part = window_partition_index(1, h, w, 1, m);
        // attention with the mask: cross-region mass must vanish exactly
        let tape = Tape::new();
        let scores = tape.constant(
            filled(nw * mm * mm, 40).iter().map(|v| v * 5.0).collect(),
            vec![nw, mm, mm],
        );
        let masked = scores
            .add(tape.constant(mask.clone(), vec![nw, mm, mm]))
            .unwrap();
        let attn = masked.softmax(2).unwrap().to_vec();
        for wi in 0..nw {
            for i in 0..mm {
                let mut row_sum = 0.0;
                for j in 0..mm {
                    let p = attn[(wi * mm + i) * mm + j];
                    row_sum += p;
                    let (ri, rj) = (
                        regions[part[(wi * mm + i) * 1]],
                        regions[part[(wi * mm + j) * 1]],
                    );
                    let entry = mask[(wi * mm + i) * mm + j];
                    if ri == rj {
                        assert_eq!(entry, 0.0, "window {wi} pair ({i},{j})");
                        assert!(p > 0.0);
                    } else {
                        assert_eq!(entry, MASK_NEG);
                        assert_eq!(p, 0.0, "leak in window {wi} pair ({i},{j})");
                    }
                }
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
        }

        // partition → reverse is bitwise identity
        let d = 3;
        let x = filled(h * w * d, 41);
        let xt = tape.constant(x.clone(), vec![1, h, w, d]);
        let windows = xt
            .gather(Rc::new(window_partition_index(1, h, w, d, m)), &[nw, mm, d])
            .unwrap();
        let back = windows
            .gather(Rc::new(window_reverse_index(1, h, w, d, m)), &[1, h, w, d])
            .unwrap();
        assert_eq!(back.to_vec(), x);
    });
}

// ── criterion 5: dilated convolution oracle ──────────────────────────

#[test]
fn c05_dilated_conv_oracle() {
    criterion(5, "dilation ≡ zero-inserted kernel + receptive fields", || {
        let (cin, cout, hw) = (2, 3, 9);
        let x = filled(cin * hw * hw, 50);
        for k in [1usize, 3] {
            for d in [1usize, 2, 3] {
                let weight = filled(cout * cin * k * k, (10 * k + d) as u64);
                let pad = d * (k - 1) / 2;
                let tape = Tape::new();
                let xt = tape.constant(x.clone(), vec![1, cin, hw, hw]);
                let wt = tape.constant(weight.clone(), vec![cout, cin, k, k]);
                let ours = xt.conv2d(wt, None, 1, pad, d).unwrap().to_vec();

                let (dense, ke) = common::zero_inserted_kernel(&weight, cout, cin, k, d);
                let (reference, oh, ow) =
                    common::conv2d_reference(&x, (1, cin, hw, hw), &dense, cout, ke, 1, pad);
                assert_eq!(ours.len(), cout * oh * ow);
                for (a, b) in ours.iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-10, "k={k} d={d}: {a} vs {b}");
                }
            }
        }

        for block in RF_SCHEDULE {
            for r in block {
                let k = kernel_for(r);
                let d = dilation_for(r).unwrap();
                assert_eq!(receptive_field(k, d), r, "r={r} → k={k}, d={d}");
            }
        }
    });
}

// ── criterion 6: metrics oracle ──────────────────────────────────────

#[test]
fn c06_metrics_oracle() {
    criterion(6, "metrics vs brute-force oracle", || {
        let mut rng = seeded_rng(60);
        for case in 0..200 {
            let h = rng.gen_range(1..=32);
            let w = rng.gen_range(1..=32);
            let l = rng.gen_range(2..=6usize);
            let gen_mask = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
                (0..h * w)
                    .map(|_| {
                        if rng.gen_bool(0.1) {
                            255
                        } else {
                            rng.gen_range(0..l as u8)
                        }
                    })
                    .collect()
            };
            let gt = gen_mask(&mut rng);
            let pred: Vec<u8> = gen_mask(&mut rng)
                .into_iter()
                .map(|v| if v == 255 { 0 } else { v })
                .collect();

            let counts = confusion(&pred, &gt, l, 255).unwrap();
            let report = metrics(&counts);
            let oracle = common::metrics_oracle(&pred, &gt, l, 255);

            for (c, (ours, reference)) in report.per_class.iter().zip(oracle.counts.iter()).enumerate() {
                assert_eq!(ours.counts, *reference, "case {case} class {c}");
                assert_eq!(ours.iou, oracle.iou[c]);
                assert_eq!(ours.acc, oracle.acc[c]);
                assert_eq!(ours.f1, oracle.f1[c]);
                if let (Some(iou), Some(f1)) = (ours.iou, ours.f1) {
                    assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-15);
                }
            }
            assert_eq!(report.miou, oracle.miou, "case {case}");
            assert_eq!(report.oa, oracle.oa);
            assert_eq!(report.mf1, oracle.mf1);
            assert_eq!(report.pixel_accuracy, oracle.pixel_accuracy);
        }
    });
}

// ── criterion 7: synthetic overfit ───────────────────────────────────

#[test]
fn c07_overfit_synthetic() {
    criterion(7, "overfit 8 synthetic images to 99%", || {
        let start = std::time::Instant::now();
        let model = AerialFormer::new(ModelConfig::toy(8, 4, [1, 2, 2, 2], 4).unwrap()).unwrap();
        let store = model.init_params(42);
        let data = make_synthetic(8, 64, 4, 123, 0.05).unwrap();
        // base lr 6e-5 scaled x10 to fit the iteration budget
        let cfg = TrainConfig {
            lr: 6e-4,
            iterations: 2000,
            full_batch: true,
            hflip: false,
            photometric: false,
            seed: 0,
            stop_at_accuracy: 0.99,
            ..TrainConfig::default()
        };
        let out = train_loop(&model, &store, &data, &cfg, None, |_| {}).unwrap();
        assert!(
            out.final_pixel_accuracy >= 0.99,
            "reached only {:.4} after {} iterations",
            out.final_pixel_accuracy,
            out.trace.len()
        );
        assert!(out.trace.len() <= 2000);

        let losses: Vec<f64> = out.trace.iter().map(|r| r.loss).collect();
        let ma = common::moving_average(&losses, 50);
        for (i, pair) in ma.windows(2).enumerate() {
            assert!(
                pair[1] <= pair[0],
                "moving average rose at window {i}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(
            start.elapsed().as_secs() < 1800,
            "overfit took {:?}",
            start.elapsed()
        );
    });
}

// ── criterion 8: tiled inference ─────────────────────────────────────

#[test]
fn c08_tiling() {
    criterion(8, "tiling grid counts + stitched inference", || {
        let grid = make_grid(1024, 1024, (512, 512), (256, 256)).unwrap();
        assert_eq!(grid.origins.len(), 9);
        assert_eq!(make_grid(512, 512, (512, 512), (256, 256)).unwrap().origins.len(), 1);
        assert_eq!(make_grid(300, 200, (512, 512), (256, 256)).unwrap().origins.len(), 1);

        // single tile covering the image equals a direct forward
        let model = AerialFormer::new(ModelConfig::toy(8, 4, [1, 2, 2, 2], 4).unwrap()).unwrap();
        let store = model.init_params(9);
        let sample = &make_synthetic(1, 64, 4, 80, 0.05).unwrap()[0];
        {
            // one training pass to give batch norm its running statistics
            let tape = Tape::new();
            let binder = Binder::new(&tape);
            let (img, _, h, w) = aerialformer::train::batch_tensors(std::slice::from_ref(sample)).unwrap();
            let x = tape.constant(img, vec![1, 3, h, w]);
            model.forward(&binder, &store, x, true).unwrap();
        }
        let (mask, stitched) =
            infer_image(&model, &store, &sample.image, 64, 64, (64, 64), (64, 64)).unwrap();
        let direct = {
            let tape = Tape::new();
            let binder = Binder::new(&tape);
            let (img, _, h, w) = aerialformer::train::batch_tensors(std::slice::from_ref(sample)).unwrap();
            let x = tape.constant(img, vec![1, 3, h, w]);
            model.forward(&binder, &store, x, false).unwrap().to_vec()
        };
        assert_eq!(stitched, direct);
        assert_eq!(
            mask,
            aerialformer::model::argmax_classes(&direct, &[1, 4, 64, 64])
        );

        // constructed half-overlap: the overlapped band is the exact mean
        let g = make_grid(4, 6, (4, 4), (2, 2)).unwrap();
        assert_eq!(g.origins, vec![(0, 0), (0, 2)]);
        let a = vec![1.0; 16];
        let b = vec![5.0; 16];
        let out = stitch(&[a, b], &g, 1).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let expect = match x {
                    0 | 1 => 1.0,
                    2 | 3 => 3.0, // covered by both tiles
                    _ => 5.0,
                };
                assert_eq!(out[y * 6 + x], expect, "({y}, {x})");
            }
        }
    });
}

// ── criterion 9: parameter budget ────────────────────────────────────

#[test]
fn c09_parameter_count() {
    criterion(9, "preset T parameter budget", || {
        let model = AerialFormer::new(ModelConfig::preset("t", 16).unwrap()).unwrap();
        let store = model.init_params(0);
        let (total, groups) = model.param_count(&store);
        let expected = 42.7e6;
        assert!(
            (total as f64 - expected).abs() <= 0.15 * expected,
            "total {total} outside {expected} ± 15%"
        );
        let encoder = groups["encoder"] as f64;
        let backbone = 27.5e6; // published Swin-T backbone size
        assert!(
            (encoder - backbone).abs() <= 0.02 * backbone,
            "encoder {encoder} vs backbone {backbone}"
        );
    });
}

// ── criterion 10: linear attention cost ──────────────────────────────

#[test]
fn c10_linear_complexity() {
    criterion(10, "WSA cost linear in tokens", || {
        let (d, heads, m) = (16, 2, 8);
        let wsa = WindowAttention {
            prefix: "wsa".into(),
            dim: d,
            heads,
            window: m,
            table_window: m,
        };
        let mut store = ParamStore::new();
        wsa.init(&mut store, &mut seeded_rng(3));

        let mut per_token = Vec::new();
        for side in [64usize, 128, 256] {
            let tokens = side * side;
            let nw = tokens / (m * m);
            let tape = Tape::new();
            let binder = Binder::new(&tape);
            let x = tape.constant(vec![0.1; tokens * d], vec![nw, m * m, d]);
            wsa.forward(&binder, &store, x, None).unwrap();
            per_token.push(tape.flops() as f64 / tokens as f64);
        }
        let lo = per_token.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per_token.iter().cloned().fold(0.0, f64::max);
        assert!(
            hi <= 1.3 * lo,
            "per-token flops not linear: {per_token:?}"
        );
    });
}
