//! Expanding path: five MDC blocks (pre-channel mixer → three-branch dilated
//! convolution layer → post-channel mixer) interleaved with 2× deconvolution
//! and skip concatenation, finished by a pointwise classifier.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfError, Result};
use crate::layers::{BatchNorm2d, Conv2dLayer, Deconv2dLayer};
use crate::params::{Binder, ParamStore};
use crate::tensor::{ops::concat, Tensor};

/// Receptive-field side of a dilated kernel: r = d(k−1)+1.
pub fn receptive_field(k: usize, d: usize) -> usize {
    d * (k - 1) + 1
}

/// Kernel size used for a target receptive field: 1 stays pointwise,
/// anything larger uses a dilated 3×3.
pub fn kernel_for(r: usize) -> usize {
    if r == 1 {
        1
    } else {
        3
    }
}

/// Dilation that realizes receptive field `r` with kernel `k` (inverts
/// `receptive_field`). `r` must be odd so the padding `(r−1)/2` preserves
/// spatial size.
pub fn dilation_for(r: usize) -> Result<usize> {
    if r % 2 == 0 {
        return Err(AfError::Config(format!(
            "receptive field {r} must be odd"
        )));
    }
    let k = kernel_for(r);
    Ok(if k == 1 { 1 } else { (r - 1) / (k - 1) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdcBlockConfig {
    pub receptive_fields: [usize; 3],
    pub in_channels: usize,
    /// Width of the DCL path; must be divisible by 3.
    pub working_channels: usize,
    pub out_channels: usize,
}

impl MdcBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.working_channels == 0 || self.working_channels % 3 != 0 {
            return Err(AfError::Config(format!(
                "working_channels {} must be a positive multiple of 3",
                self.working_channels
            )));
        }
        for &r in &self.receptive_fields {
            dilation_for(r)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Deepest (1/32 scale) first.
    pub blocks: [MdcBlockConfig; 5],
    pub num_classes: usize,
}

impl DecoderConfig {
    /// Standard wiring for encoder width C and stem width C/2: block output
    /// widths 8C, 4C, 2C, C, C/2, each deconv halving channels except the
    /// last, which keeps the stem width into the classifier.
    pub fn standard(
        embed_dim: usize,
        stem_channels: usize,
        schedule: &[[usize; 3]; 5],
        num_classes: usize,
    ) -> Result<Self> {
        let c = embed_dim;
        let outs = [8 * c, 4 * c, 2 * c, c, stem_channels];
        // concat of the upsampled path with the skip at each level
        let ins = [
            8 * c,
            4 * c + 4 * c,
            2 * c + 2 * c,
            c + c,
            stem_channels + stem_channels,
        ];
        let mut blocks = Vec::with_capacity(5);
        for i in 0..5 {
            let working = 3 * ((outs[i] + 1) / 3).max(1);
            let b = MdcBlockConfig {
                receptive_fields: schedule[i],
                in_channels: ins[i],
                working_channels: working,
                out_channels: outs[i],
            };
            b.validate()?;
            blocks.push(b);
        }
        if num_classes < 2 {
            return Err(AfError::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(DecoderConfig {
            blocks: blocks.try_into().map_err(|_| AfError::Config("5 blocks".into()))?,
            num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.blocks {
            b.validate()?;
        }
        if self.num_classes < 2 {
            return Err(AfError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

// ── MDC block ────────────────────────────────────────────────────────

pub struct MdcBlock {
    pub prefix: String,
    pub cfg: MdcBlockConfig,
}

impl MdcBlock {
    fn premixer(&self) -> Conv2dLayer {
        Conv2dLayer {
            prefix: format!("{}.premixer", self.prefix),
            in_ch: self.cfg.in_channels,
            out_ch: self.cfg.working_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }

    fn branch(&self, j: usize) -> Conv2dLayer {
        let r = self.cfg.receptive_fields[j];
        let k = kernel_for(r);
        let d = dilation_for(r).expect("validated config");
        let c = self.cfg.working_channels / 3;
        Conv2dLayer {
            prefix: format!("{}.dcl.branch{}", self.prefix, j + 1),
            in_ch: c,
            out_ch: c,
            kernel: k,
            stride: 1,
            padding: (r - 1) / 2,
            dilation: d,
            bias: true,
        }
    }

    fn postmixer(&self) -> [(Conv2dLayer, BatchNorm2d); 2] {
        let w = self.cfg.working_channels;
        let out = self.cfg.out_channels;
        let conv = |n: usize, in_ch: usize, kernel: usize| Conv2dLayer {
            prefix: format!("{}.postmixer.conv{}", self.prefix, n),
            in_ch,
            out_ch: out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: true,
        };
        let bn = |n: usize| BatchNorm2d {
            prefix: format!("{}.postmixer.bn{}", self.prefix, n),
            channels: out,
        };
        [(conv(1, w, 1), bn(1)), (conv(2, out, 3), bn(2))]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.premixer().init(store, rng);
        for j in 0..3 {
            self.branch(j).init(store, rng);
        }
        for (conv, bn) in self.postmixer() {
            conv.init(store, rng);
            bn.init(store, rng);
        }
    }

    /// Eq-style composition: PostMixer(DCL(PreMixer(x))), spatial size
    /// preserved throughout.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x: Tensor<'t>,
        train: bool,
    ) -> Result<Tensor<'t>> {
        let shape = x.shape();
        if shape[1] != self.cfg.in_channels {
            return Err(AfError::Wiring {
                from: format!("{} channel input", shape[1]),
                to: self.prefix.clone(),
                msg: format!("block expects {} input channels", self.cfg.in_channels),
            });
        }
        let t = self.premixer().forward(binder, store, x)?;
        let t = self.dcl(binder, store, t)?;
        let mut t = t;
        for (conv, bn) in self.postmixer() {
            t = conv.forward(binder, store, t)?;
            t = bn.forward(binder, store, t, train)?;
            t = t.relu();
        }
        Ok(t)
    }

    /// Three-way channel split, one dilated conv per branch, concat back.
    pub fn dcl<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let shape = x.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if c != self.cfg.working_channels {
            return Err(AfError::Wiring {
                from: format!("{c} channel DCL input"),
                to: format!("{}.dcl", self.prefix),
                msg: format!("expected {} channels", self.cfg.working_channels),
            });
        }
        let cb = c / 3;
        let mut parts = Vec::with_capacity(3);
        for j in 0..3 {
            let sub = x.gather(
                Rc::new(channel_slice_index(n, c, h, w, j * cb, (j + 1) * cb)),
                &[n, cb, h, w],
            )?;
            let out = self.branch(j).forward(binder, store, sub)?;
            let os = out.shape();
            if os[2] != h || os[3] != w {
                return Err(AfError::Geometry {
                    op: "dcl",
                    msg: format!(
                        "branch {} changed spatial size {h}x{w} -> {}x{}",
                        j + 1,
                        os[2],
                        os[3]
                    ),
                });
            }
            parts.push(out);
        }
        concat(&parts, 1)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.premixer().params();
        for j in 0..3 {
            n += self.branch(j).params();
        }
        for (conv, bn) in self.postmixer() {
            n += conv.params() + 2 * bn.channels;
        }
        n
    }
}

/// Flat index map extracting channels `[c0, c1)` of an NCHW tensor.
pub fn channel_slice_index(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    c0: usize,
    c1: usize,
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * (c1 - c0) * h * w);
    for ni in 0..n {
        for ci in c0..c1 {
            let base = (ni * c + ci) * h * w;
            idx.extend(base..base + h * w);
        }
    }
    idx
}

// ── decoder ──────────────────────────────────────────────────────────

pub struct MdcDecoder {
    pub cfg: DecoderConfig,
}

impl MdcDecoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MdcDecoder { cfg })
    }

    fn block(&self, i: usize) -> MdcBlock {
        MdcBlock {
            prefix: format!("decoder.block{}", i + 1),
            cfg: self.cfg.blocks[i].clone(),
        }
    }

    fn deconv(&self, i: usize) -> (Deconv2dLayer, BatchNorm2d) {
        let out_ch = self.cfg.blocks[i].out_channels;
        // every deconv halves the channel width except the last, which
        // keeps the stem width into the classifier
        let up_ch = if i == 4 { out_ch } else { out_ch / 2 };
        (
            Deconv2dLayer {
                prefix: format!("decoder.deconv{}", i + 1),
                in_ch: out_ch,
                out_ch: up_ch,
            },
            BatchNorm2d {
                prefix: format!("decoder.deconv{}.bn", i + 1),
                channels: up_ch,
            },
        )
    }

    fn head(&self) -> Conv2dLayer {
        Conv2dLayer {
            prefix: "decoder.head".into(),
            in_ch: self.cfg.blocks[4].out_channels,
            out_ch: self.cfg.num_classes,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for i in 0..5 {
            self.block(i).init(store, rng);
            let (dc, bn) = self.deconv(i);
            dc.init(store, rng);
            bn.init(store, rng);
        }
        self.head().init(store, rng);
    }

    /// `features` are the encoder pyramid `[F1..F4]` and `stem_out` the
    /// half-resolution stem path, all NCHW. Returns logits `[N, L, H, W]`
    /// at the original image resolution.
    pub fn decode<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        features: &[Tensor<'t>; 4],
        stem_out: Tensor<'t>,
        train: bool,
    ) -> Result<Tensor<'t>> {
        // skips from deep to shallow: F3, F2, F1, stem
        let skips = [features[2], features[1], features[0], stem_out];
        let mut x = features[3];
        for i in 0..5 {
            if i > 0 {
                let skip = skips[i - 1];
                let (xs, ss) = (x.shape(), skip.shape());
                if xs[2] != ss[2] || xs[3] != ss[3] {
                    return Err(AfError::Wiring {
                        from: format!("skip {}x{}", ss[2], ss[3]),
                        to: format!("decoder.block{} input {}x{}", i + 1, xs[2], xs[3]),
                        msg: "skip and upsampled path disagree on spatial size".into(),
                    });
                }
                x = concat(&[x, skip], 1)?;
            }
            x = self.block(i).forward(binder, store, x, train)?;
            let (dc, bn) = self.deconv(i);
            x = dc.forward(binder, store, x)?;
            x = bn.forward(binder, store, x, train)?;
            x = x.relu();
        }
        self.head().forward(binder, store, x)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.head().params();
        for i in 0..5 {
            n += self.block(i).param_count();
            let (dc, bn) = self.deconv(i);
            n += dc.in_ch * dc.out_ch * 4 + dc.out_ch + 2 * bn.channels;
        }
        n
    }
}
