//! Cross-entropy supervision, Adam with decoupled weight decay, light
//! augmentation, and a small iteration-based training loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{AfError, Result};
use crate::model::{argmax_classes, AerialFormer};
use crate::params::{seeded_rng, Binder, ParamStore};
use crate::tensor::Tape;

pub const IGNORE_INDEX: i64 = 255;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub iterations: usize,
    pub ignore_index: i64,
    pub hflip: bool,
    pub photometric: bool,
    pub seed: u64,
    /// Checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
    /// Use the whole dataset every iteration instead of sampling.
    pub full_batch: bool,
    /// Stop once batch pixel accuracy reaches this (0 = never).
    pub stop_at_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 6e-5,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            batch_size: 8,
            iterations: 2000,
            ignore_index: IGNORE_INDEX,
            hflip: true,
            photometric: true,
            seed: 0,
            checkpoint_every: 0,
            full_batch: false,
            stop_at_accuracy: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed so a no-op loop stays expressible
        if self.lr < 0.0 {
            return Err(AfError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(AfError::Config(format!("betas must be in [0,1), got {b}")));
            }
        }
        if self.batch_size < 1 {
            return Err(AfError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────

const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with decoupled multiplicative weight decay applied
/// only to decay-eligible parameters.
pub struct Adam {
    pub cfg: TrainConfig,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(cfg: TrainConfig) -> Self {
        Adam {
            cfg,
            moments: HashMap::new(),
            step_count: 0,
        }
    }

    /// Apply one update using `grads` from a backward pass. Every trainable
    /// parameter must have a gradient.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &HashMap<String, Option<Vec<f64>>>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (path, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(path)
                .and_then(|g| g.as_ref())
                .ok_or_else(|| AfError::Training(format!("no gradient for parameter {path}")))?;
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = p.data.borrow_mut();
            let shrink = if p.decay {
                1.0 - self.cfg.lr * self.cfg.weight_decay
            } else {
                1.0
            };
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * shrink - self.cfg.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

// ── augmentation ─────────────────────────────────────────────────────

/// Horizontal flip (joint, p=0.5) plus brightness/contrast jitter (±25%,
/// image only). Mask class ids are never altered, only repositioned.
pub fn augment(sample: &SegSample, cfg: &TrainConfig, rng: &mut impl Rng) -> SegSample {
    let mut out = sample.clone();
    if cfg.hflip && rng.gen_bool(0.5) {
        let (h, w) = (out.height, out.width);
        for y in 0..h {
            for x in 0..w / 2 {
                let (a, b) = (y * w + x, y * w + (w - 1 - x));
                for c in 0..3 {
                    out.image.swap(a * 3 + c, b * 3 + c);
                }
                out.mask.swap(a, b);
            }
        }
    }
    if cfg.photometric {
        let brightness = rng.gen_range(0.75..=1.25);
        let contrast = rng.gen_range(0.75..=1.25);
        for px in out.image.iter_mut() {
            let v = *px as f64 / 255.0;
            let v = ((v - 0.5) * contrast + 0.5) * brightness;
            *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub pixel_accuracy: f64,
}

/// Pack samples into a normalized `[B,3,H,W]` image buffer and an i64
/// target buffer.
pub fn batch_tensors(samples: &[SegSample]) -> Result<(Vec<f64>, Vec<i64>, usize, usize)> {
    let (h, w) = (samples[0].height, samples[0].width);
    let plane = h * w;
    let mut img = Vec::with_capacity(samples.len() * 3 * plane);
    let mut tgt = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(AfError::Training(format!(
                "sample {} is {}x{}, batch expects {h}x{w}",
                s.id, s.height, s.width
            )));
        }
        for c in 0..3 {
            img.extend(s.image.chunks_exact(3).map(|p| p[c] as f64 / 255.0));
        }
        tgt.extend(s.mask.iter().map(|&m| m as i64));
    }
    Ok((img, tgt, h, w))
}

pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub final_loss: f64,
    pub final_pixel_accuracy: f64,
}

/// Iteration loop: sample → augment → forward → cross-entropy → backward →
/// Adam. Emits one JSONL trace record per iteration and checkpoints into
/// `out_dir` when given.
pub fn train_loop(
    model: &AerialFormer,
    store: &ParamStore,
    dataset: &[SegSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&TraceRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(AfError::Training("dataset is empty".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut adam = Adam::new(cfg.clone());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut trace_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("loss_trace.jsonl"),
            )?))
        }
        None => None,
    };

    for iter in 0..cfg.iterations {
        let batch: Vec<SegSample> = if cfg.full_batch {
            dataset.iter().map(|s| augment(s, cfg, &mut rng)).collect()
        } else {
            (0..cfg.batch_size)
                .map(|_| {
                    let s = &dataset[rng.gen_range(0..dataset.len())];
                    augment(s, cfg, &mut rng)
                })
                .collect()
        };
        let (img, tgt, h, w) = batch_tensors(&batch)?;

        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let x = tape.constant(img, vec![batch.len(), 3, h, w]);
        let logits = model.forward(&binder, store, x, true)?;
        let loss = logits.cross_entropy(&tgt, cfg.ignore_index)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(AfError::Training(format!(
                "non-finite loss {loss_val} at iteration {iter} (config: {})",
                serde_json::to_string(cfg)?
            )));
        }
        loss.backward()?;
        adam.step(store, &binder.grads())?;

        let pred = argmax_classes(&logits.to_vec(), &logits.shape());
        let (mut correct, mut counted) = (0usize, 0usize);
        for (p, t) in pred.iter().zip(tgt.iter()) {
            if *t != cfg.ignore_index {
                counted += 1;
                correct += (*p as i64 == *t) as usize;
            }
        }
        let rec = TraceRecord {
            iteration: iter,
            loss: loss_val,
            pixel_accuracy: if counted > 0 {
                correct as f64 / counted as f64
            } else {
                1.0
            },
        };
        if let Some(f) = trace_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        progress(&rec);
        let reached = cfg.stop_at_accuracy > 0.0 && rec.pixel_accuracy >= cfg.stop_at_accuracy;
        trace.push(rec);
        if reached {
            break;
        }

        if let Some(dir) = out_dir {
            let every = cfg.checkpoint_every;
            if every > 0 && (iter + 1) % every == 0 {
                store.save(&dir.join(format!("checkpoint_{:06}.bin", iter + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        store.save(&dir.join("checkpoint_final.bin"))?;
    }
    let last = trace.last().unwrap();
    Ok(TrainOutcome {
        final_loss: last.loss,
        final_pixel_accuracy: last.pixel_accuracy,
        trace,
    })
}
