//! Parallel low-level feature path: four convolutions, each followed by
//! BatchNorm and GELU; only the first downsamples (3×3, stride 2).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfError, Result};
use crate::layers::{BatchNorm2d, Conv2dLayer};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StemConfig {
    pub out_channels: usize,
}

pub struct CnnStem {
    pub cfg: StemConfig,
}

impl CnnStem {
    pub fn new(cfg: StemConfig) -> Result<Self> {
        if cfg.out_channels < 1 {
            return Err(AfError::Config("stem out_channels must be >= 1".into()));
        }
        Ok(CnnStem { cfg })
    }

    fn layers(&self) -> Vec<(Conv2dLayer, BatchNorm2d)> {
        let c = self.cfg.out_channels;
        (0..4)
            .map(|i| {
                let conv = Conv2dLayer {
                    prefix: format!("stem.conv{}", i + 1),
                    in_ch: if i == 0 { 3 } else { c },
                    out_ch: c,
                    kernel: 3,
                    stride: if i == 0 { 2 } else { 1 },
                    padding: 1,
                    dilation: 1,
                    bias: true,
                };
                let bn = BatchNorm2d {
                    prefix: format!("stem.bn{}", i + 1),
                    channels: c,
                };
                (conv, bn)
            })
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (conv, bn) in self.layers() {
            conv.init(store, rng);
            bn.init(store, rng);
        }
    }

    /// `[N, 3, H, W]` (H, W even) → `[N, C_stem, H/2, W/2]`.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        img: Tensor<'t>,
        train: bool,
    ) -> Result<Tensor<'t>> {
        let shape = img.shape();
        let (h, w) = (shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AfError::Geometry {
                op: "stem_forward",
                msg: format!("input {h}x{w} must have even spatial dims"),
            });
        }
        let mut x = img;
        for (conv, bn) in self.layers() {
            x = conv.forward(binder, store, x)?;
            x = bn.forward(binder, store, x, train)?;
            x = x.gelu();
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(conv, bn)| conv.params() + 2 * bn.channels)
            .sum()
    }
}
