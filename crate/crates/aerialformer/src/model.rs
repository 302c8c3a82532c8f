//! Full model: CNN stem + hierarchical encoder + MDC decoder, with the
//! named T/S/B presets, input padding, and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, MdcDecoder};
use crate::encoder::{EncoderConfig, SwinEncoder};
use crate::error::{AfError, Result};
use crate::params::{seeded_rng, Binder, ParamStore};
use crate::stem::{CnnStem, StemConfig};
use crate::tensor::{Tape, Tensor};

/// Receptive-field schedule deepest→shallowest.
pub const RF_SCHEDULE: [[usize; 3]; 5] =
    [[1, 3, 3], [3, 3, 3], [3, 5, 7], [3, 5, 7], [3, 5, 7]];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub encoder: EncoderConfig,
    pub stem: StemConfig,
    pub decoder: DecoderConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Named preset: "t" | "s" | "b".
    pub fn preset(variant: &str, num_classes: usize) -> Result<Self> {
        let (embed_dim, window, depths) = match variant {
            "t" => (96, 7, [2usize, 2, 6, 2]),
            "s" => (96, 7, [2, 2, 18, 2]),
            "b" => (128, 12, [2, 2, 18, 2]),
            other => {
                return Err(AfError::Config(format!(
                    "unknown variant {other:?}, expected one of t, s, b"
                )))
            }
        };
        let heads = match embed_dim {
            96 => [3, 6, 12, 24],
            128 => [4, 8, 16, 32],
            _ => unreachable!(),
        };
        Self::build(variant, embed_dim, window, depths, heads, 4, num_classes)
    }

    /// Small configuration for tests and quick experiments.
    pub fn toy(embed_dim: usize, window: usize, heads: [usize; 4], num_classes: usize) -> Result<Self> {
        Self::build("toy", embed_dim, window, [1, 1, 1, 1], heads, 1, num_classes)
    }

    fn build(
        variant: &str,
        embed_dim: usize,
        window: usize,
        depths: [usize; 4],
        heads: [usize; 4],
        ffn_expansion: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let encoder = EncoderConfig {
            patch_size: 4,
            embed_dim,
            window,
            depths,
            heads,
            ffn_expansion,
        };
        encoder.validate()?;
        if embed_dim % 2 != 0 {
            return Err(AfError::Config(format!(
                "embed_dim {embed_dim} must be even (stem width is half)"
            )));
        }
        let stem = StemConfig {
            out_channels: embed_dim / 2,
        };
        let decoder =
            DecoderConfig::standard(embed_dim, stem.out_channels, &RF_SCHEDULE, num_classes)?;
        Ok(ModelConfig {
            variant: variant.to_string(),
            encoder,
            stem,
            decoder,
            num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.num_classes != self.decoder.num_classes {
            return Err(AfError::Config(format!(
                "num_classes {} disagrees with decoder head {}",
                self.num_classes, self.decoder.num_classes
            )));
        }
        Ok(())
    }

    pub fn from_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AfError::Data {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Smallest multiple of 32 that is `≥ n`; encoder blocks handle any
    /// window-size remainder themselves by padding the token grid.
    pub fn padded_dim(&self, n: usize) -> usize {
        n.div_ceil(32) * 32
    }
}

pub struct AerialFormer {
    pub cfg: ModelConfig,
    pub stem: CnnStem,
    pub encoder: SwinEncoder,
    pub decoder: MdcDecoder,
}

impl AerialFormer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AerialFormer {
            stem: CnnStem::new(cfg.stem.clone())?,
            encoder: SwinEncoder::new(cfg.encoder.clone())?,
            decoder: MdcDecoder::new(cfg.decoder.clone())?,
            cfg,
        })
    }

    /// Fresh parameter store with every weight initialized deterministically
    /// from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        self.stem.init(&mut store, &mut rng);
        self.encoder.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store
    }

    /// Logits `[N, L, H, W]` for an image `[N, 3, H, W]`. Inputs whose sides
    /// are not compatible with the window/stride geometry are reflect-padded
    /// and the logits cropped back.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        img: Tensor<'t>,
        train: bool,
    ) -> Result<Tensor<'t>> {
        let shape = img.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(AfError::Geometry {
                op: "forward",
                msg: format!("expected [N,3,H,W] image, got {shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let (hp, wp) = (self.cfg.padded_dim(h), self.cfg.padded_dim(w));
        let img = if (hp, wp) != (h, w) {
            reflect_pad(img, hp, wp)?
        } else {
            img
        };

        let stem_out = self.stem.forward(binder, store, img, train)?;
        let feats_nhwc = self.encoder.encode(binder, store, img)?;
        let mut feats = Vec::with_capacity(4);
        for f in feats_nhwc {
            feats.push(f.permute(&[0, 3, 1, 2])?);
        }
        let feats: [Tensor<'t>; 4] = [feats[0], feats[1], feats[2], feats[3]];
        let logits = self
            .decoder
            .decode(binder, store, &feats, stem_out, train)?;

        if (hp, wp) != (h, w) {
            crop(logits, h, w)
        } else {
            Ok(logits)
        }
    }

    /// Trainable parameter count, itemized by top-level module.
    pub fn param_count(&self, store: &ParamStore) -> (usize, indexmap::IndexMap<String, usize>) {
        let mut groups: indexmap::IndexMap<String, usize> = indexmap::IndexMap::new();
        let mut total = 0;
        for (path, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let group = path.split('.').next().unwrap_or("").to_string();
            *groups.entry(group).or_insert(0) += p.numel();
            total += p.numel();
        }
        (total, groups)
    }
}

/// Reflect-pad an NCHW tensor on the bottom/right to `hp × wp`
/// (PyTorch-style reflection, excluding the edge pixel itself).
fn reflect_pad<'t>(x: Tensor<'t>, hp: usize, wp: usize) -> Result<Tensor<'t>> {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if hp - h >= h || wp - w >= w {
        return Err(AfError::Geometry {
            op: "reflect_pad",
            msg: format!("cannot reflect-pad {h}x{w} to {hp}x{wp}: pad exceeds size"),
        });
    }
    let reflect = |i: usize, dim: usize| if i < dim { i } else { 2 * dim - 2 - i };
    let mut idx = Vec::with_capacity(n * c * hp * wp);
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..hp {
            let ry = reflect(y, h);
            for xcol in 0..wp {
                idx.push(base + ry * w + reflect(xcol, w));
            }
        }
    }
    x.gather(std::rc::Rc::new(idx), &[n, c, hp, wp])
}

/// Crop an NCHW tensor to its top-left `h × w` corner.
fn crop<'t>(x: Tensor<'t>, h: usize, w: usize) -> Result<Tensor<'t>> {
    let shape = x.shape();
    let (n, c, hp, wp) = (shape[0], shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        let base = p * hp * wp;
        for y in 0..h {
            idx.extend((0..w).map(|xcol| base + y * wp + xcol));
        }
    }
    x.gather(std::rc::Rc::new(idx), &[n, c, h, w])
}

/// One inference pass on raw image data, returning per-pixel logits.
/// BN uses running statistics, so the result is a pure function of the
/// weights.
pub fn infer_logits(
    model: &AerialFormer,
    store: &ParamStore,
    img: &[f64],
    n: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let tape = Tape::new();
    let binder = Binder::new(&tape);
    let x = tape.constant(img.to_vec(), vec![n, 3, h, w]);
    let logits = model.forward(&binder, store, x, false)?;
    Ok((logits.to_vec(), logits.shape()))
}

/// Per-pixel argmax over the class axis of `[N, L, H, W]` logits; ties break
/// toward the lowest class index.
pub fn argmax_classes(logits: &[f64], shape: &[usize]) -> Vec<u8> {
    let (n, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for cls in 0..l {
                let v = logits[(ni * l + cls) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = cls;
                }
            }
            out[ni * plane + p] = best as u8;
        }
    }
    out
}
