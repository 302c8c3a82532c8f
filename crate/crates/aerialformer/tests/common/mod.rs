//! Shared oracles for the integration suite. Everything here is written as
//! plain loops, independent of the library's fast paths, so the two sides
//! can disagree.

#![allow(dead_code)]

use aerialformer::metrics::ClassCounts;

pub const FD_STEP: f64 = 1e-5;

/// Central finite difference of a scalar function at coordinate `i` of `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += FD_STEP;
    minus[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Relative error with a unit floor so tiny gradients don't blow it up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check an analytic gradient against central differences on every (or a
/// sampled subset of) coordinate(s).
pub fn assert_grad_matches(
    name: &str,
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    tol: f64,
) {
    assert_eq!(x.len(), grad.len(), "{name}: gradient length");
    for &i in coords {
        let fd = central_diff(f, x, i);
        let err = rel_err(grad[i], fd);
        assert!(
            err < tol,
            "{name}: coord {i} analytic {} vs fd {fd}, rel err {err:.3e} >= {tol:.0e}",
            grad[i]
        );
    }
}

/// Reference multi-head attention over all `n` tokens at once: separate
/// q/k/v/out projections with biases, per-head scaled dot-product softmax.
/// Weights are `[d, d]` row-major (input index first), matching `x · W`.
pub fn global_mhsa(
    x: &[f64], // [n, d]
    n: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    bq: &[f64],
    wk: &[f64],
    bk: &[f64],
    wv: &[f64],
    bv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let dh = d / heads;
    let proj = |w: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..d {
                let mut acc = b[j];
                for i in 0..d {
                    acc += x[t * d + i] * w[i * d + j];
                }
                out[t * d + j] = acc;
            }
        }
        out
    };
    let q = proj(wq, bq);
    let k = proj(wk, bk);
    let v = proj(wv, bv);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut ctx = vec![0.0; n * d]; // heads concatenated back into d
    for h in 0..heads {
        let off = h * dh;
        for t in 0..n {
            let mut scores = vec![0.0; n];
            for s in 0..n {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[t * d + off + c] * k[s * d + off + c];
                }
                scores[s] = dot * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in 0..n {
                let w = scores[s] / sum;
                for c in 0..dh {
                    ctx[t * d + off + c] += w * v[s * d + off + c];
                }
            }
        }
    }

    let mut out = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            let mut acc = bo[j];
            for i in 0..d {
                acc += ctx[t * d + i] * wo[i * d + j];
            }
            out[t * d + j] = acc;
        }
    }
    out
}

/// Plain direct 2-D cross-correlation, NCHW, no dilation (d = 1 hard-coded
/// so dilation support is exercised only through zero-inserted kernels).
pub fn conv2d_reference(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64], // [cout, cin, k, k]
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * cin + ic) * h + iy as usize) * w + ix as usize]
                                    * weight[((oc * cin + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Expand a `[cout, cin, k, k]` kernel to its zero-inserted equivalent of
/// side `d(k−1)+1`, so a dilated conv can be checked against a dense one.
pub fn zero_inserted_kernel(weight: &[f64], cout: usize, cin: usize, k: usize, d: usize) -> (Vec<f64>, usize) {
    let ke = d * (k - 1) + 1;
    let mut out = vec![0.0; cout * cin * ke * ke];
    for oc in 0..cout {
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[((oc * cin + ic) * ke + ky * d) * ke + kx * d] =
                        weight[((oc * cin + ic) * k + ky) * k + kx];
                }
            }
        }
    }
    (out, ke)
}

/// Brute-force segmentation metrics: per-pixel counting and the ratio
/// formulas, written directly from their definitions.
pub struct OracleReport {
    pub counts: Vec<ClassCounts>,
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub mf1: f64,
    pub pixel_accuracy: f64,
}

pub fn metrics_oracle(pred: &[u8], gt: &[u8], num_classes: usize, ignore: u8) -> OracleReport {
    let mut counts = vec![ClassCounts::default(); num_classes];
    let mut evaluated = 0u64;
    for l in 0..num_classes {
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (pl, gl) = (p as usize == l, g as usize == l);
            if gl && pl {
                counts[l].tp += 1;
            } else if gl {
                counts[l].fn_ += 1;
            } else if pl {
                counts[l].fp += 1;
            } else {
                counts[l].tn += 1;
            }
        }
    }
    for &g in gt {
        evaluated += (g != ignore) as u64;
    }
    let mut iou = Vec::new();
    let mut acc = Vec::new();
    let mut f1 = Vec::new();
    // accuracy is reported for every class when anything was evaluated, but
    // only classes with support contribute to the means
    let mut oa_terms = Vec::new();
    for c in &counts {
        let support = c.tp + c.fn_ + c.fp;
        acc.push((evaluated > 0).then(|| (c.tp + c.tn) as f64 / evaluated as f64));
        if support == 0 {
            iou.push(None);
            f1.push(None);
        } else {
            iou.push(Some(c.tp as f64 / support as f64));
            f1.push(Some(2.0 * c.tp as f64 / (2 * c.tp + c.fn_ + c.fp) as f64));
            oa_terms.push((c.tp + c.tn) as f64 / evaluated as f64);
        }
    }
    let mean = |def: Vec<f64>| {
        if def.is_empty() {
            0.0
        } else {
            def.iter().sum::<f64>() / def.len() as f64
        }
    };
    let tp_total: u64 = counts.iter().map(|c| c.tp).sum();
    OracleReport {
        miou: mean(iou.iter().flatten().cloned().collect()),
        oa: mean(oa_terms),
        mf1: mean(f1.iter().flatten().cloned().collect()),
        pixel_accuracy: if evaluated > 0 {
            tp_total as f64 / evaluated as f64
        } else {
            0.0
        },
        counts,
        iou,
        acc,
        f1,
    }
}

/// Trailing moving average with the given window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if xs.len() < window {
        return Vec::new();
    }
    (0..=xs.len() - window)
        .map(|i| xs[i..i + window].iter().sum::<f64>() / window as f64)
        .collect()
}
