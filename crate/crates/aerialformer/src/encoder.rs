//! Hierarchical four-stage encoder: patch embedding, window self-attention
//! with relative position bias and alternating shifted windows, FFN, and
//! patch merging.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfError, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
/// Additive mask value; anything this far below the row max underflows to
/// exactly zero after the stabilized softmax.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Patch size p.
    pub patch_size: usize,
    /// Embedding dim C at stage 1.
    pub embed_dim: usize,
    /// Window side M.
    pub window: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub ffn_expansion: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 1 || self.window < 1 {
            return Err(AfError::Config(format!(
                "patch_size and window must be >= 1, got p={}, M={}",
                self.patch_size, self.window
            )));
        }
        for (s, (&d, &h)) in self.depths.iter().zip(self.heads.iter()).enumerate() {
            if d < 1 {
                return Err(AfError::Config(format!("stage {} depth must be >= 1", s + 1)));
            }
            let dim = self.stage_dim(s);
            if dim % h != 0 {
                return Err(AfError::Config(format!(
                    "stage {} dim {dim} not divisible by head count {h}",
                    s + 1
                )));
            }
        }
        Ok(())
    }

    /// Feature dim of stage `s` (0-based): 2^s * C.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }
}

// ── index-map builders (all bijections realized through gather) ──────

/// Flat index map regrouping `[n, h, w, d]` into `[n*nw, m*m, d]` windows,
/// row-major over (window row, window col) then (in-window row, col).
pub fn window_partition_index(n: usize, h: usize, w: usize, d: usize, m: usize) -> Vec<usize> {
    let (wh, ww) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * h * w * d);
    for ni in 0..n {
        for wy in 0..wh {
            for wx in 0..ww {
                for iy in 0..m {
                    for ix in 0..m {
                        let (y, x) = (wy * m + iy, wx * m + ix);
                        let base = ((ni * h + y) * w + x) * d;
                        for c in 0..d {
                            idx.push(base + c);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`window_partition_index`].
pub fn window_reverse_index(n: usize, h: usize, w: usize, d: usize, m: usize) -> Vec<usize> {
    let fwd = window_partition_index(n, h, w, d, m);
    let mut inv = vec![0usize; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Cyclic shift on the two spatial axes of `[n, h, w, d]`:
/// out[y][x] = in[(y + sy) mod h][(x + sx) mod w].
pub fn roll_index(n: usize, h: usize, w: usize, d: usize, sy: usize, sx: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * h * w * d);
    for ni in 0..n {
        for y in 0..h {
            let sy_ = (y + sy) % h;
            for x in 0..w {
                let sx_ = (x + sx) % w;
                let base = ((ni * h + sy_) * w + sx_) * d;
                for c in 0..d {
                    idx.push(base + c);
                }
            }
        }
    }
    idx
}

/// `m²×m²` map from token-pair relative displacement into the
/// `(2m−1)×(2m−1)` bias table. Pairs with equal displacement share an entry.
pub fn rel_pos_index(m: usize) -> Vec<usize> {
    rel_pos_index_for(m, m)
}

/// Displacement map for an effective window `m_eff` (possibly clamped to a
/// small token grid) into a table sized for `m_table` ≥ `m_eff`.
pub fn rel_pos_index_for(m_eff: usize, m_table: usize) -> Vec<usize> {
    let side = 2 * m_table - 1;
    let mut idx = Vec::with_capacity(m_eff * m_eff * m_eff * m_eff);
    for yi in 0..m_eff {
        for xi in 0..m_eff {
            for yj in 0..m_eff {
                for xj in 0..m_eff {
                    let dy = yi + m_table - 1 - yj;
                    let dx = xi + m_table - 1 - xj;
                    idx.push(dy * side + dx);
                }
            }
        }
    }
    idx
}

/// Region ids for the shifted-window attention mask: the grid is cut into
/// the three segments `[0, h−m)`, `[h−m, h−s)`, `[h−s, h)` per axis (on
/// post-shift coordinates); tokens from different pre-shift regions get
/// different ids.
pub fn shift_region_ids(h: usize, w: usize, m: usize, s: usize) -> Vec<usize> {
    let seg = |pos: usize, dim: usize| -> usize {
        if pos < dim - m {
            0
        } else if pos < dim - s {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(seg(y, h) * 3 + seg(x, w));
        }
    }
    ids
}

/// Additive attention mask `[nW, m², m²]`: 0 within a pre-shift region,
/// [`MASK_NEG`] across regions.
pub fn shift_attention_mask(h: usize, w: usize, m: usize, s: usize) -> Vec<f64> {
    let ids = shift_region_ids(h, w, m, s);
    let part = window_partition_index(1, h, w, 1, m);
    let nw = (h / m) * (w / m);
    let win_ids: Vec<usize> = part.iter().map(|&i| ids[i]).collect();
    let mm = m * m;
    let mut mask = vec![0.0; nw * mm * mm];
    for wi in 0..nw {
        for i in 0..mm {
            for j in 0..mm {
                if win_ids[wi * mm + i] != win_ids[wi * mm + j] {
                    mask[(wi * mm + i) * mm + j] = MASK_NEG;
                }
            }
        }
    }
    mask
}

// ── window attention ─────────────────────────────────────────────────

/// Multi-head self-attention inside one window, with relative position bias.
pub struct WindowAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    /// Effective window side for this forward (≤ `table_window`).
    pub window: usize,
    /// Window side the bias table was sized for.
    pub table_window: usize,
}

impl WindowAttention {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        for name in ["q", "k", "v", "proj"] {
            store.register(
                &format!("{}.{}.weight", self.prefix, name),
                vec![d, d],
                Init::TruncNormal(0.02),
                true,
                true,
                rng,
            );
            store.register(
                &format!("{}.{}.bias", self.prefix, name),
                vec![d],
                Init::Zeros,
                true,
                false,
                rng,
            );
        }
        let side = 2 * self.table_window - 1;
        store.register(
            &format!("{}.rel_bias", self.prefix),
            vec![self.heads, side * side],
            Init::TruncNormal(0.02),
            true,
            false,
            rng,
        );
    }

    /// `x_windows` is `[B, m², d]`; `mask`, when present, is `[nW, m², m²]`
    /// and `B` must be a multiple of `nW`.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x_windows: Tensor<'t>,
        mask: Option<&[f64]>,
    ) -> Result<Tensor<'t>> {
        let tape = binder.tape();
        let shape = x_windows.shape();
        let (b, mm, d) = (shape[0], shape[1], shape[2]);
        if d % self.heads != 0 {
            return Err(AfError::Config(format!(
                "dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let project = |name: &str, input: Tensor<'t>| -> Result<Tensor<'t>> {
            let w = binder.get(store, &format!("{}.{}.weight", self.prefix, name));
            let bias = binder.get(store, &format!("{}.{}.bias", self.prefix, name));
            input.matmul(w)?.add_bias_last(bias)
        };
        // [B, m², d] -> [B, heads, m², dh]
        let to_heads = |t: Tensor<'t>| -> Result<Tensor<'t>> {
            t.reshape(&[b, mm, self.heads, dh])?.permute(&[0, 2, 1, 3])
        };

        let q = to_heads(project("q", x_windows)?)?;
        let k = to_heads(project("k", x_windows)?)?;
        let v = to_heads(project("v", x_windows)?)?;

        let kt = k.permute(&[0, 1, 3, 2])?;
        let mut attn = q.matmul(kt)?.scale(scale);

        // relative position bias, shared across windows
        let table = binder.get(store, &format!("{}.rel_bias", self.prefix));
        let rel = rel_pos_index_for(self.window, self.table_window);
        if rel.len() != mm * mm {
            return Err(AfError::Geometry {
                op: "wsa",
                msg: format!(
                    "window {} gives {} token pairs but input has {}",
                    self.window,
                    rel.len(),
                    mm * mm
                ),
            });
        }
        let side2 = (2 * self.table_window - 1) * (2 * self.table_window - 1);
        let mut bias_idx = Vec::with_capacity(b * self.heads * mm * mm);
        for _ in 0..b {
            for hd in 0..self.heads {
                for &r in &rel {
                    bias_idx.push(hd * side2 + r);
                }
            }
        }
        let bias = table.gather(Rc::new(bias_idx), &[b, self.heads, mm, mm])?;
        attn = attn.add(bias)?;

        if let Some(mask) = mask {
            let nw = mask.len() / (mm * mm);
            debug_assert_eq!(mask.len(), nw * mm * mm);
            debug_assert_eq!(b % nw, 0);
            let mut full = Vec::with_capacity(b * self.heads * mm * mm);
            for bi in 0..b {
                let wi = bi % nw;
                for _ in 0..self.heads {
                    full.extend_from_slice(&mask[wi * mm * mm..(wi + 1) * mm * mm]);
                }
            }
            let mask_t = tape.constant(full, vec![b, self.heads, mm, mm]);
            attn = attn.add(mask_t)?;
        }

        let attn = attn.softmax(3)?;
        let out = attn
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, mm, d])?;
        project("proj", out)
    }
}

// ── transformer block ────────────────────────────────────────────────

pub struct EncoderBlock {
    pub prefix: String,
    pub dim: usize,
    pub ffn_expansion: usize,
    pub attn: WindowAttention,
    /// Whether this block uses the shifted window grid.
    pub shifted: bool,
}

impl EncoderBlock {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.dim;
        for norm in ["norm1", "norm2"] {
            store.register(
                &format!("{}.{}.gamma", self.prefix, norm),
                vec![d],
                Init::Ones,
                true,
                false,
                rng,
            );
            store.register(
                &format!("{}.{}.beta", self.prefix, norm),
                vec![d],
                Init::Zeros,
                true,
                false,
                rng,
            );
        }
        self.attn.init(store, rng);
        let hidden = d * self.ffn_expansion;
        store.register(
            &format!("{}.mlp.fc1.weight", self.prefix),
            vec![d, hidden],
            Init::TruncNormal(0.02),
            true,
            true,
            rng,
        );
        store.register(
            &format!("{}.mlp.fc1.bias", self.prefix),
            vec![hidden],
            Init::Zeros,
            true,
            false,
            rng,
        );
        store.register(
            &format!("{}.mlp.fc2.weight", self.prefix),
            vec![hidden, d],
            Init::TruncNormal(0.02),
            true,
            true,
            rng,
        );
        store.register(
            &format!("{}.mlp.fc2.bias", self.prefix),
            vec![d],
            Init::Zeros,
            true,
            false,
            rng,
        );
    }

    /// Pre-norm residual WSA then pre-norm residual FFN on `[n, h, w, d]`.
    /// Grids not divisible by the (clamped) window are zero-padded for the
    /// attention and cropped back.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let shape = x.shape();
        let (n, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        // windows never exceed the token grid
        let m = self.attn.window.min(h).min(w);
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let shift = if self.shifted && m < h.min(w) { m / 2 } else { 0 };

        let ln = |name: &str, t: Tensor<'t>| -> Result<Tensor<'t>> {
            let gamma = binder.get(store, &format!("{}.{}.gamma", self.prefix, name));
            let beta = binder.get(store, &format!("{}.{}.beta", self.prefix, name));
            t.layer_norm(gamma, beta, LN_EPS)
        };

        // WSA branch
        let mut t = ln("norm1", x)?;
        if (hp, wp) != (h, w) {
            t = pad_grid(t, hp, wp)?;
        }
        if shift > 0 {
            t = t.gather(
                Rc::new(roll_index(n, hp, wp, d, shift, shift)),
                &[n, hp, wp, d],
            )?;
        }
        let nw = (hp / m) * (wp / m);
        let windows = t.gather(
            Rc::new(window_partition_index(n, hp, wp, d, m)),
            &[n * nw, m * m, d],
        )?;
        let mask = if shift > 0 {
            Some(shift_attention_mask(hp, wp, m, shift))
        } else {
            None
        };
        let attn_windows = {
            let attn = WindowAttention {
                prefix: self.attn.prefix.clone(),
                dim: self.attn.dim,
                heads: self.attn.heads,
                window: m,
                table_window: self.attn.table_window,
            };
            attn.forward(binder, store, windows, mask.as_deref())?
        };
        let mut t = attn_windows.gather(
            Rc::new(window_reverse_index(n, hp, wp, d, m)),
            &[n, hp, wp, d],
        )?;
        if shift > 0 {
            let (back_y, back_x) = (hp - shift, wp - shift);
            t = t.gather(
                Rc::new(roll_index(n, hp, wp, d, back_y, back_x)),
                &[n, hp, wp, d],
            )?;
        }
        if (hp, wp) != (h, w) {
            t = crop_grid(t, h, w)?;
        }
        let x = x.add(t)?;

        // FFN branch
        let t = ln("norm2", x)?;
        let rows = n * h * w;
        let t = t.reshape(&[rows, d])?;
        let fc1_w = binder.get(store, &format!("{}.mlp.fc1.weight", self.prefix));
        let fc1_b = binder.get(store, &format!("{}.mlp.fc1.bias", self.prefix));
        let fc2_w = binder.get(store, &format!("{}.mlp.fc2.weight", self.prefix));
        let fc2_b = binder.get(store, &format!("{}.mlp.fc2.bias", self.prefix));
        let t = t
            .matmul(fc1_w)?
            .add_bias_last(fc1_b)?
            .gelu()
            .matmul(fc2_w)?
            .add_bias_last(fc2_b)?
            .reshape(&[n, h, w, d])?;
        x.add(t)
    }
}

// ── encoder ──────────────────────────────────────────────────────────

pub struct SwinEncoder {
    pub cfg: EncoderConfig,
}

impl SwinEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SwinEncoder { cfg })
    }

    fn blocks(&self, stage: usize) -> Vec<EncoderBlock> {
        let dim = self.cfg.stage_dim(stage);
        (0..self.cfg.depths[stage])
            .map(|l| EncoderBlock {
                prefix: format!("encoder.stage{}.block{}", stage + 1, l),
                dim,
                ffn_expansion: self.cfg.ffn_expansion,
                attn: WindowAttention {
                    prefix: format!("encoder.stage{}.block{}.attn", stage + 1, l),
                    dim,
                    heads: self.cfg.heads[stage],
                    window: self.cfg.window,
                    table_window: self.cfg.window,
                },
                // first block of each stage unshifted, alternating after
                shifted: l % 2 == 1,
            })
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.cfg.embed_dim;
        let p = self.cfg.patch_size;
        store.register(
            "encoder.patch_embed.proj.weight",
            vec![c, 3, p, p],
            Init::TruncNormal(0.02),
            true,
            true,
            rng,
        );
        store.register(
            "encoder.patch_embed.proj.bias",
            vec![c],
            Init::Zeros,
            true,
            false,
            rng,
        );
        store.register(
            "encoder.patch_embed.norm.gamma",
            vec![c],
            Init::Ones,
            true,
            false,
            rng,
        );
        store.register(
            "encoder.patch_embed.norm.beta",
            vec![c],
            Init::Zeros,
            true,
            false,
            rng,
        );
        for s in 0..4 {
            for b in self.blocks(s) {
                b.init(store, rng);
            }
            let dim = self.cfg.stage_dim(s);
            if s < 3 {
                store.register(
                    &format!("encoder.stage{}.merge.norm.gamma", s + 1),
                    vec![4 * dim],
                    Init::Ones,
                    true,
                    false,
                    rng,
                );
                store.register(
                    &format!("encoder.stage{}.merge.norm.beta", s + 1),
                    vec![4 * dim],
                    Init::Zeros,
                    true,
                    false,
                    rng,
                );
                store.register(
                    &format!("encoder.stage{}.merge.reduction.weight", s + 1),
                    vec![4 * dim, 2 * dim],
                    Init::TruncNormal(0.02),
                    true,
                    true,
                    rng,
                );
            }
            store.register(
                &format!("encoder.out_norm{}.gamma", s + 1),
                vec![dim],
                Init::Ones,
                true,
                false,
                rng,
            );
            store.register(
                &format!("encoder.out_norm{}.beta", s + 1),
                vec![dim],
                Init::Zeros,
                true,
                false,
                rng,
            );
        }
    }

    /// Patch embedding: p×p conv with stride p, then LayerNorm, NHWC out.
    pub fn patch_embed<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        img: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let shape = img.shape();
        let (h, w) = (shape[2], shape[3]);
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(AfError::Geometry {
                op: "patch_embed",
                msg: format!("image {h}x{w} not divisible by patch size {p}"),
            });
        }
        let wt = binder.get(store, "encoder.patch_embed.proj.weight");
        let bias = binder.get(store, "encoder.patch_embed.proj.bias");
        let feat = img.conv2d(wt, Some(bias), p, 0, 1)?; // [n, C, h/p, w/p]
        let feat = feat.permute(&[0, 2, 3, 1])?;
        let gamma = binder.get(store, "encoder.patch_embed.norm.gamma");
        let beta = binder.get(store, "encoder.patch_embed.norm.beta");
        feat.layer_norm(gamma, beta, LN_EPS)
    }

    /// Checkerboard gather (ee, eo, oe, oo) to `[n, h/2, w/2, 4d]`, then
    /// LayerNorm and linear projection to 2d.
    pub fn patch_merge<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        stage: usize,
        x: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let shape = x.shape();
        let (n, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AfError::Geometry {
                op: "patch_merge",
                msg: format!("token grid {h}x{w} must be even"),
            });
        }
        let gathered = x.gather(
            Rc::new(patch_merge_index(n, h, w, d)),
            &[n, h / 2, w / 2, 4 * d],
        )?;
        let gamma = binder.get(store, &format!("encoder.stage{}.merge.norm.gamma", stage + 1));
        let beta = binder.get(store, &format!("encoder.stage{}.merge.norm.beta", stage + 1));
        let gathered = gathered.layer_norm(gamma, beta, LN_EPS)?;
        let red = binder.get(
            store,
            &format!("encoder.stage{}.merge.reduction.weight", stage + 1),
        );
        let rows = n * (h / 2) * (w / 2);
        gathered
            .reshape(&[rows, 4 * d])?
            .matmul(red)?
            .reshape(&[n, h / 2, w / 2, 2 * d])
    }

    /// Four pyramid features, NHWC, at 1/4 … 1/32 of the input resolution.
    /// `F_s` is the stage-s block output (normalized) before that stage's
    /// merge.
    pub fn encode<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        img: Tensor<'t>,
    ) -> Result<[Tensor<'t>; 4]> {
        let shape = img.shape();
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(AfError::Geometry {
                op: "encode",
                msg: format!("input {h}x{w} must be a multiple of 32"),
            });
        }
        let mut x = self.patch_embed(binder, store, img)?;
        let mut features = Vec::with_capacity(4);
        for s in 0..4 {
            for b in self.blocks(s) {
                x = b.forward(binder, store, x)?;
            }
            let gamma = binder.get(store, &format!("encoder.out_norm{}.gamma", s + 1));
            let beta = binder.get(store, &format!("encoder.out_norm{}.beta", s + 1));
            features.push(x.layer_norm(gamma, beta, LN_EPS)?);
            if s < 3 {
                x = self.patch_merge(binder, store, s, x)?;
            }
        }
        Ok([features[0], features[1], features[2], features[3]])
    }
}

/// Zero-pad the spatial axes of `[n, h, w, d]` on the bottom/right.
fn pad_grid<'t>(x: Tensor<'t>, hp: usize, wp: usize) -> Result<Tensor<'t>> {
    let shape = x.shape();
    let (n, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut t = x;
    if wp > w {
        let zeros = t.tape.constant(vec![0.0; n * h * (wp - w) * d], vec![n, h, wp - w, d]);
        t = crate::tensor::ops::concat(&[t, zeros], 2)?;
    }
    if hp > h {
        let zeros = t.tape.constant(vec![0.0; n * (hp - h) * wp * d], vec![n, hp - h, wp, d]);
        t = crate::tensor::ops::concat(&[t, zeros], 1)?;
    }
    Ok(t)
}

/// Crop `[n, hp, wp, d]` back to its top-left `h × w` token grid.
fn crop_grid<'t>(x: Tensor<'t>, h: usize, w: usize) -> Result<Tensor<'t>> {
    let shape = x.shape();
    let (n, hp, wp, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(n * h * w * d);
    for ni in 0..n {
        for y in 0..h {
            for xc in 0..w {
                let base = ((ni * hp + y) * wp + xc) * d;
                idx.extend(base..base + d);
            }
        }
    }
    x.gather(Rc::new(idx), &[n, h, w, d])
}

/// Four stride-2 sub-grids (even/even, even/odd, odd/even, odd/odd)
/// concatenated channel-wise.
pub fn patch_merge_index(n: usize, h: usize, w: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * h * w * d);
    for ni in 0..n {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((ni * h + 2 * y + dy) * w + 2 * x + dx) * d;
                    for c in 0..d {
                        idx.push(base + c);
                    }
                }
            }
        }
    }
    idx
}
