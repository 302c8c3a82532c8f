//! Forward operators and their backward rules.

use std::rc::Rc;

use rayon::prelude::*;

use super::conv;
use super::{strides_of, BackOp, TapeInner, Tensor, TensorId};
use crate::error::{AfError, Result};

// ── dense matmul helpers ─────────────────────────────────────────────

/// c = a (m×k) · b (k×n)
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// c = a (m×n) · bᵀ where b is (k×n); result m×k
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    c.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    c
}

/// c = aᵀ · b where a is (m×k), b is (m×n); result k×n
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let av = &a[i * k..(i + 1) * k];
        let bv = &b[i * n..(i + 1) * n];
        for (p, ap) in av.iter().enumerate() {
            if *ap == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, b) in crow.iter_mut().zip(bv) {
                *cv += ap * b;
            }
        }
    }
    c
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<'t> Tensor<'t> {
    fn binary_same_shape(self, other: Tensor<'t>, op_name: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(AfError::Shape {
                op: op_name,
                left: a,
                right: b,
            });
        }
        Ok(())
    }

    pub fn add(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_same_shape(other, "add")?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        self.tape.add_flops(data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id) || self.tape.node_requires_grad(other.id);
        Ok(self
            .tape
            .push(data, self.shape(), rg, BackOp::Add(self.id, other.id)))
    }

    pub fn mul(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_same_shape(other, "mul")?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        self.tape.add_flops(data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id) || self.tape.node_requires_grad(other.id);
        Ok(self
            .tape
            .push(data, self.shape(), rg, BackOp::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Tensor<'t> {
        let data: Vec<f64> = self.data().iter().map(|x| x * s).collect();
        self.tape.add_flops(data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id);
        self.tape.push(data, self.shape(), rg, BackOp::Scale(self.id, s))
    }

    /// Broadcast `bias` (1-D, length = last dim) over all leading dims.
    pub fn add_bias_last(self, bias: Tensor<'t>) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let bshape = bias.shape();
        let d = *shape.last().unwrap_or(&0);
        if bshape.len() != 1 || bshape[0] != d {
            return Err(AfError::Shape {
                op: "add_bias_last",
                left: shape,
                right: bshape,
            });
        }
        let data: Vec<f64> = {
            let a = self.data();
            let b = bias.data();
            a.chunks(d)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| x + y).collect::<Vec<_>>())
                .collect()
        };
        self.tape.add_flops(data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id) || self.tape.node_requires_grad(bias.id);
        Ok(self
            .tape
            .push(data, self.shape(), rg, BackOp::AddBiasLast(self.id, bias.id)))
    }

    pub fn sum(self) -> Tensor<'t> {
        let s: f64 = self.data().iter().sum();
        self.tape.add_flops(self.numel() as u64);
        let rg = self.tape.node_requires_grad(self.id);
        self.tape.push(vec![s], vec![1], rg, BackOp::Sum(self.id))
    }

    pub fn mean(self) -> Tensor<'t> {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        self.tape.add_flops(n as u64);
        let rg = self.tape.node_requires_grad(self.id);
        self.tape.push(vec![s], vec![1], rg, BackOp::Mean(self.id))
    }

    pub fn relu(self) -> Tensor<'t> {
        let data: Vec<f64> = self.data().iter().map(|x| x.max(0.0)).collect();
        self.tape.add_flops(data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id);
        self.tape.push(data, self.shape(), rg, BackOp::Relu(self.id))
    }

    /// Exact Gaussian-CDF GELU (erf form, not the tanh approximation).
    pub fn gelu(self) -> Tensor<'t> {
        let data: Vec<f64> = self.data().iter().map(|x| gelu_scalar(*x)).collect();
        self.tape.add_flops(10 * data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id);
        self.tape.push(data, self.shape(), rg, BackOp::Gelu(self.id))
    }

    /// Batched matrix product. `self` is `[..., m, k]`; `other` is either
    /// `[k, n]` (shared across the batch) or `[..., k, n]` with identical
    /// leading dims.
    pub fn matmul(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let ashape = self.shape();
        let bshape = other.shape();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(AfError::Shape {
                op: "matmul",
                left: ashape,
                right: bshape,
            });
        }
        let m = ashape[ashape.len() - 2];
        let k = ashape[ashape.len() - 1];
        let kb = bshape[bshape.len() - 2];
        let n = bshape[bshape.len() - 1];
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let b_batched = bshape.len() > 2;
        let bbatch: usize = bshape[..bshape.len() - 2].iter().product();
        if k != kb || (b_batched && bbatch != batch) {
            return Err(AfError::Shape {
                op: "matmul",
                left: ashape,
                right: bshape,
            });
        }
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            let (a, b): (&[f64], &[f64]) = (&a, &b);
            let mut out = vec![0.0; batch * m * n];
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, slab)| {
                let av = &a[bi * m * k..(bi + 1) * m * k];
                let bv = if b_batched {
                    &b[bi * k * n..(bi + 1) * k * n]
                } else {
                    &b[..]
                };
                slab.copy_from_slice(&mm_nn(av, bv, m, k, n));
            });
            out
        };
        self.tape.add_flops(2 * (batch * m * k * n) as u64);
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.tape.node_requires_grad(self.id) || self.tape.node_requires_grad(other.id);
        Ok(self.tape.push(
            data,
            out_shape,
            rg,
            BackOp::Matmul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                b_batched,
            },
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AfError::Geometry {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_spans(&shape, axis);
        let data: Vec<f64> = {
            let x = self.data();
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        mx = mx.max(x[base + j * inner]);
                    }
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (x[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..len {
                        out[base + j * inner] /= z;
                    }
                }
            }
            out
        };
        self.tape.add_flops(5 * data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id);
        Ok(self
            .tape
            .push(data, shape, rg, BackOp::Softmax { x: self.id, axis }))
    }

    /// LayerNorm over the last dimension with learnable affine.
    pub fn layer_norm(self, gamma: Tensor<'t>, beta: Tensor<'t>, eps: f64) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| AfError::Geometry {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if gamma.shape() != vec![d] || beta.shape() != vec![d] {
            return Err(AfError::Shape {
                op: "layer_norm",
                left: vec![d],
                right: gamma.shape(),
            });
        }
        let rows = self.numel() / d;
        let mut stats = Vec::with_capacity(rows);
        let data: Vec<f64> = {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                stats.push((mean, rstd));
                for j in 0..d {
                    out[r * d + j] = g[j] * (row[j] - mean) * rstd + b[j];
                }
            }
            out
        };
        self.tape.add_flops(8 * data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id)
            || self.tape.node_requires_grad(gamma.id)
            || self.tape.node_requires_grad(beta.id);
        Ok(self.tape.push(
            data,
            shape,
            rg,
            BackOp::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats: Rc::new(stats),
            },
        ))
    }

    /// BatchNorm over (N, H, W) per channel of an NCHW tensor, using batch
    /// statistics. Returns the output plus the batch mean/variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        eps: f64,
    ) -> Result<(Tensor<'t>, Vec<f64>, Vec<f64>)> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(AfError::Geometry {
                op: "batch_norm",
                msg: format!("expected NCHW input, got shape {shape:?}"),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if n * h * w < 2 {
            return Err(AfError::Geometry {
                op: "batch_norm",
                msg: format!("training mode needs N*H*W >= 2, got {}", n * h * w),
            });
        }
        if gamma.shape() != vec![c] || beta.shape() != vec![c] {
            return Err(AfError::Shape {
                op: "batch_norm",
                left: vec![c],
                right: gamma.shape(),
            });
        }
        let cnt = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let x = self.data();
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * h * w;
                    mean[ci] += x[off..off + h * w].iter().sum::<f64>();
                }
            }
            for m in mean.iter_mut() {
                *m /= cnt;
            }
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * h * w;
                    var[ci] += x[off..off + h * w]
                        .iter()
                        .map(|v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<f64>();
                }
            }
            for v in var.iter_mut() {
                *v /= cnt;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(gamma, beta, &mean, &rstd, true)?;
        Ok((out, mean, var))
    }

    /// BatchNorm with frozen running statistics (inference mode).
    pub fn batch_norm_eval(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(AfError::Geometry {
                op: "batch_norm",
                msg: format!("expected NCHW input, got shape {shape:?}"),
            });
        }
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(gamma, beta, running_mean, &rstd, false)
    }

    fn bn_apply(
        self,
        gamma: Tensor<'t>,
        beta: Tensor<'t>,
        mean: &[f64],
        rstd: &[f64],
        batch_stats: bool,
    ) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let data: Vec<f64> = {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            let mut out = vec![0.0; x.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * h * w;
                    let (m, r, gg, bb) = (mean[ci], rstd[ci], g[ci], b[ci]);
                    for p in 0..h * w {
                        out[off + p] = gg * (x[off + p] - m) * r + bb;
                    }
                }
            }
            out
        };
        self.tape.add_flops(4 * data.len() as u64);
        let rg = self.tape.node_requires_grad(self.id)
            || self.tape.node_requires_grad(gamma.id)
            || self.tape.node_requires_grad(beta.id);
        Ok(self.tape.push(
            data,
            shape,
            rg,
            BackOp::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: Rc::new(mean.to_vec()),
                rstd: Rc::new(rstd.to_vec()),
                batch_stats,
            },
        ))
    }

    /// 2-D cross-correlation with zero padding. `self` is NCHW, `w` is
    /// `[cout, cin, k, k]`.
    pub fn conv2d(
        self,
        w: Tensor<'t>,
        bias: Option<Tensor<'t>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor<'t>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(AfError::Shape {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(AfError::Shape {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if k < 1 || stride < 1 || dilation < 1 {
            return Err(AfError::Geometry {
                op: "conv2d",
                msg: format!("k={k}, stride={stride}, dilation={dilation} must all be >= 1"),
            });
        }
        let oh = conv::conv2d_out_dim(h, k, stride, padding, dilation);
        let ow = conv::conv2d_out_dim(wd, k, stride, padding, dilation);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(AfError::Geometry {
                    op: "conv2d",
                    msg: format!(
                        "empty output: input {h}x{wd}, k={k}, stride={stride}, \
                         padding={padding}, dilation={dilation}"
                    ),
                })
            }
        };
        if let Some(b) = &bias {
            if b.shape() != vec![cout] {
                return Err(AfError::Shape {
                    op: "conv2d",
                    left: vec![cout],
                    right: b.shape(),
                });
            }
        }
        let data = {
            let x = self.data();
            let wdat = w.data();
            let bdat = bias.map(|b| b.to_vec());
            conv::conv2d_forward(
                &x,
                &wdat,
                bdat.as_deref(),
                n,
                cin,
                h,
                wd,
                cout,
                k,
                stride,
                padding,
                dilation,
                oh,
                ow,
            )
        };
        self.tape
            .add_flops(2 * (n * cout * oh * ow * cin * k * k) as u64);
        let rg = self.tape.node_requires_grad(self.id)
            || self.tape.node_requires_grad(w.id)
            || bias.map_or(false, |b| self.tape.node_requires_grad(b.id));
        Ok(self.tape.push(
            data,
            vec![n, cout, oh, ow],
            rg,
            BackOp::Conv2d {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
                dilation,
            },
        ))
    }

    /// Transposed convolution. `self` is NCHW, `w` is `[cin, cout, k, k]`.
    pub fn conv_transpose2d(
        self,
        w: Tensor<'t>,
        bias: Option<Tensor<'t>>,
        stride: usize,
    ) -> Result<Tensor<'t>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(AfError::Shape {
                op: "conv_transpose2d",
                left: xs,
                right: ws,
            });
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        if ws[0] != cin {
            return Err(AfError::Shape {
                op: "conv_transpose2d",
                left: xs,
                right: ws,
            });
        }
        let oh = conv::conv_transpose2d_out_dim(h, k, stride);
        let ow = conv::conv_transpose2d_out_dim(wd, k, stride);
        if let Some(b) = &bias {
            if b.shape() != vec![cout] {
                return Err(AfError::Shape {
                    op: "conv_transpose2d",
                    left: vec![cout],
                    right: b.shape(),
                });
            }
        }
        let data = {
            let x = self.data();
            let wdat = w.data();
            let bdat = bias.map(|b| b.to_vec());
            conv::conv_transpose2d_forward(
                &x,
                &wdat,
                bdat.as_deref(),
                n,
                cin,
                h,
                wd,
                cout,
                k,
                stride,
                oh,
                ow,
            )
        };
        self.tape
            .add_flops(2 * (n * cin * h * wd * cout * k * k) as u64);
        let rg = self.tape.node_requires_grad(self.id)
            || self.tape.node_requires_grad(w.id)
            || bias.map_or(false, |b| self.tape.node_requires_grad(b.id));
        Ok(self.tape.push(
            data,
            vec![n, cout, oh, ow],
            rg,
            BackOp::ConvTranspose2d {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                stride,
            },
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if perm.len() != shape.len() {
            return Err(AfError::Geometry {
                op: "permute",
                msg: format!("perm {perm:?} does not match rank of {shape:?}"),
            });
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(AfError::Geometry {
                    op: "permute",
                    msg: format!("invalid permutation {perm:?}"),
                });
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = {
            let x = self.data();
            permute_data(&x, &shape, perm)
        };
        let rg = self.tape.node_requires_grad(self.id);
        Ok(self.tape.push(
            data,
            out_shape,
            rg,
            BackOp::Permute {
                x: self.id,
                perm: Rc::new(perm.to_vec()),
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'t>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(AfError::Shape {
                op: "reshape",
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let rg = self.tape.node_requires_grad(self.id);
        Ok(self
            .tape
            .push(data, shape.to_vec(), rg, BackOp::Reshape(self.id)))
    }

    /// out[i] = self.flat[idx[i]], viewed as `out_shape`. Backward scatters
    /// gradients additively, so index maps may repeat entries.
    pub fn gather(self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<'t>> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(AfError::Shape {
                op: "gather",
                left: vec![idx.len()],
                right: out_shape.to_vec(),
            });
        }
        let n = self.numel();
        let data = {
            let x = self.data();
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx.iter() {
                if i >= n {
                    return Err(AfError::Geometry {
                        op: "gather",
                        msg: format!("index {i} out of bounds for {n} elements"),
                    });
                }
                out.push(x[i]);
            }
            out
        };
        let rg = self.tape.node_requires_grad(self.id);
        Ok(self.tape.push(
            data,
            out_shape.to_vec(),
            rg,
            BackOp::Gather { x: self.id, idx },
        ))
    }

    /// Mean cross-entropy over non-ignored pixels. `self` is logits
    /// `[N, L, H, W]`; `target` is row-major `[N, H, W]` class ids.
    pub fn cross_entropy(self, target: &[i64], ignore_index: i64) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(AfError::Geometry {
                op: "cross_entropy",
                msg: format!("expected [N, L, H, W] logits, got {shape:?}"),
            });
        }
        let (n, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if target.len() != n * h * w {
            return Err(AfError::Shape {
                op: "cross_entropy",
                left: shape,
                right: vec![target.len()],
            });
        }
        let mut total = 0.0;
        let mut evaluated = 0usize;
        {
            let x = self.data();
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let t = target[(ni * h + y) * w + xx];
                        if t == ignore_index {
                            continue;
                        }
                        if t < 0 || t as usize >= l {
                            return Err(AfError::Data {
                                path: format!("pixel (n={ni}, y={y}, x={xx})"),
                                msg: format!("class id {t} outside [0, {l})"),
                            });
                        }
                        let mut mx = f64::NEG_INFINITY;
                        for c in 0..l {
                            mx = mx.max(x[((ni * l + c) * h + y) * w + xx]);
                        }
                        let mut z = 0.0;
                        for c in 0..l {
                            z += (x[((ni * l + c) * h + y) * w + xx] - mx).exp();
                        }
                        let lse = mx + z.ln();
                        total += lse - x[((ni * l + t as usize) * h + y) * w + xx];
                        evaluated += 1;
                    }
                }
            }
        }
        // All pixels ignored is defined as zero loss with zero gradients.
        let loss = if evaluated == 0 {
            0.0
        } else {
            total / evaluated as f64
        };
        self.tape.add_flops(4 * self.numel() as u64);
        let rg = self.tape.node_requires_grad(self.id);
        Ok(self.tape.push(
            vec![loss],
            vec![1],
            rg,
            BackOp::CrossEntropy {
                logits: self.id,
                target: Rc::new(target.to_vec()),
                ignore_index,
                evaluated,
            },
        ))
    }
}

/// Concatenate along `axis`. All other dims must agree.
pub fn concat<'t>(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let first = parts[0].shape();
    let mut axis_total = 0;
    let mut meta = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(first.iter())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(AfError::Shape {
                op: "concat",
                left: first,
                right: s,
            });
        }
        axis_total += s[axis];
        meta.push((p.id, s[axis]));
    }
    let (outer, _, inner) = axis_spans(&first, axis);
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;
    let mut data = vec![0.0; outer * axis_total * inner];
    let mut offset = 0;
    for p in parts {
        let s = p.shape();
        let len = s[axis];
        let src = p.data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        offset += len;
    }
    let rg = parts.iter().any(|p| tape.node_requires_grad(p.id));
    Ok(tape.push(
        data,
        out_shape,
        rg,
        BackOp::Concat {
            parts: Rc::new(meta),
            axis,
        },
    ))
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; x.len()];
    // walk output indices; map back through the permutation
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for d in 0..rank {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = x[src];
    }
    out
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn accum(inner: &mut TapeInner, id: TensorId, contribution: &[f64]) {
    if !inner.nodes[id].requires_grad {
        return;
    }
    let node = &mut inner.nodes[id];
    match &mut node.grad {
        Some(g) => {
            for (gv, c) in g.iter_mut().zip(contribution) {
                *gv += c;
            }
        }
        None => node.grad = Some(contribution.to_vec()),
    }
}

fn needs(inner: &TapeInner, id: TensorId) -> bool {
    inner.nodes[id].requires_grad
}

pub(crate) fn backward_step(inner: &mut TapeInner, i: usize) {
    let op = inner.nodes[i].op.clone();
    let g = match inner.nodes[i].grad.clone() {
        Some(g) => g,
        None => return,
    };
    match op {
        BackOp::Leaf => {}
        BackOp::Add(a, b) => {
            accum(inner, a, &g);
            accum(inner, b, &g);
        }
        BackOp::Mul(a, b) => {
            if needs(inner, a) {
                let da: Vec<f64> = inner.nodes[b]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(bv, gv)| bv * gv)
                    .collect();
                accum(inner, a, &da);
            }
            if needs(inner, b) {
                let db: Vec<f64> = inner.nodes[a]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(av, gv)| av * gv)
                    .collect();
                accum(inner, b, &db);
            }
        }
        BackOp::Scale(a, s) => {
            let da: Vec<f64> = g.iter().map(|gv| gv * s).collect();
            accum(inner, a, &da);
        }
        BackOp::AddBiasLast(a, bias) => {
            accum(inner, a, &g);
            if needs(inner, bias) {
                let d = inner.nodes[bias].data.len();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc, gv) in db.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                accum(inner, bias, &db);
            }
        }
        BackOp::Sum(a) => {
            let da = vec![g[0]; inner.nodes[a].data.len()];
            accum(inner, a, &da);
        }
        BackOp::Mean(a) => {
            let n = inner.nodes[a].data.len();
            let da = vec![g[0] / n as f64; n];
            accum(inner, a, &da);
        }
        BackOp::Relu(a) => {
            let da: Vec<f64> = inner.nodes[a]
                .data
                .iter()
                .zip(g.iter())
                .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            accum(inner, a, &da);
        }
        BackOp::Gelu(a) => {
            let da: Vec<f64> = inner.nodes[a]
                .data
                .iter()
                .zip(g.iter())
                .map(|(x, gv)| gelu_grad_scalar(*x) * gv)
                .collect();
            accum(inner, a, &da);
        }
        BackOp::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        } => {
            if needs(inner, a) {
                let bdat = &inner.nodes[b].data;
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    let gv = &g[bi * m * n..(bi + 1) * m * n];
                    let bv = if b_batched {
                        &bdat[bi * k * n..(bi + 1) * k * n]
                    } else {
                        &bdat[..]
                    };
                    da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&mm_nt(gv, bv, m, n, k));
                }
                accum(inner, a, &da);
            }
            if needs(inner, b) {
                let adat = &inner.nodes[a].data;
                let db = if b_batched {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let av = &adat[bi * m * k..(bi + 1) * m * k];
                        let gv = &g[bi * m * n..(bi + 1) * m * n];
                        db[bi * k * n..(bi + 1) * k * n].copy_from_slice(&mm_tn(av, gv, m, k, n));
                    }
                    db
                } else {
                    // shared weight: sum contributions over the batch
                    mm_tn(adat, &g, batch * m, k, n)
                };
                accum(inner, b, &db);
            }
        }
        BackOp::Softmax { x, axis } => {
            if needs(inner, x) {
                let y = &inner.nodes[i].data;
                let shape = inner.nodes[i].shape.clone();
                let (outer, len, in_) = axis_spans(&shape, axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..in_ {
                        let base = o * len * in_ + ii;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[base + j * in_] * y[base + j * in_];
                        }
                        for j in 0..len {
                            dx[base + j * in_] = y[base + j * in_] * (g[base + j * in_] - dot);
                        }
                    }
                }
                accum(inner, x, &dx);
            }
        }
        BackOp::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let d = inner.nodes[gamma].data.len();
            let rows = inner.nodes[x].data.len() / d;
            if needs(inner, beta) {
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc, gv) in db.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                accum(inner, beta, &db);
            }
            if needs(inner, gamma) {
                let xd = &inner.nodes[x].data;
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    let (m, rstd) = stats[r];
                    for j in 0..d {
                        dg[j] += g[r * d + j] * (xd[r * d + j] - m) * rstd;
                    }
                }
                accum(inner, gamma, &dg);
            }
            if needs(inner, x) {
                let xd = &inner.nodes[x].data;
                let gd = &inner.nodes[gamma].data;
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let (m, rstd) = stats[r];
                    let mut sum_gg = 0.0;
                    let mut sum_ggy = 0.0;
                    for j in 0..d {
                        let yhat = (xd[r * d + j] - m) * rstd;
                        let gg = g[r * d + j] * gd[j];
                        sum_gg += gg;
                        sum_ggy += gg * yhat;
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let yhat = (xd[r * d + j] - m) * rstd;
                        let gg = g[r * d + j] * gd[j];
                        dx[r * d + j] = rstd * (gg - sum_gg * inv_d - yhat * sum_ggy * inv_d);
                    }
                }
                accum(inner, x, &dx);
            }
        }
        BackOp::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
            batch_stats,
        } => {
            let shape = inner.nodes[x].shape.clone();
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let cnt = (n * plane) as f64;
            if needs(inner, beta) {
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        db[ci] += g[off..off + plane].iter().sum::<f64>();
                    }
                }
                accum(inner, beta, &db);
            }
            if needs(inner, gamma) {
                let xd = &inner.nodes[x].data;
                let mut dg = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for p in 0..plane {
                            dg[ci] += g[off + p] * (xd[off + p] - mean[ci]) * rstd[ci];
                        }
                    }
                }
                accum(inner, gamma, &dg);
            }
            if needs(inner, x) {
                let xd = &inner.nodes[x].data;
                let gd = &inner.nodes[gamma].data;
                let mut dx = vec![0.0; xd.len()];
                if batch_stats {
                    for ci in 0..c {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for p in 0..plane {
                                let xhat = (xd[off + p] - mean[ci]) * rstd[ci];
                                sum_g += g[off + p];
                                sum_gx += g[off + p] * xhat;
                            }
                        }
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for p in 0..plane {
                                let xhat = (xd[off + p] - mean[ci]) * rstd[ci];
                                dx[off + p] = gd[ci]
                                    * rstd[ci]
                                    * (g[off + p] - sum_g / cnt - xhat * sum_gx / cnt);
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for p in 0..plane {
                                dx[off + p] = g[off + p] * gd[ci] * rstd[ci];
                            }
                        }
                    }
                }
                accum(inner, x, &dx);
            }
        }
        BackOp::Conv2d {
            x,
            w,
            bias,
            stride,
            padding,
            dilation,
        } => {
            let xs = inner.nodes[x].shape.clone();
            let ws = inner.nodes[w].shape.clone();
            let os = inner.nodes[i].shape.clone();
            let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ws[0], ws[2]);
            let (oh, ow) = (os[2], os[3]);
            if needs(inner, x) {
                let wdat = &inner.nodes[w].data;
                let dx = conv::conv2d_backward_x(
                    &g, wdat, n, cin, h, wd, cout, k, stride, padding, dilation, oh, ow,
                );
                accum(inner, x, &dx);
            }
            if needs(inner, w) {
                let xd = &inner.nodes[x].data;
                let dw = conv::conv2d_backward_w(
                    &g, xd, n, cin, h, wd, cout, k, stride, padding, dilation, oh, ow,
                );
                accum(inner, w, &dw);
            }
            if let Some(b) = bias {
                if needs(inner, b) {
                    let mut db = vec![0.0; cout];
                    for ni in 0..n {
                        for co in 0..cout {
                            let off = (ni * cout + co) * oh * ow;
                            db[co] += g[off..off + oh * ow].iter().sum::<f64>();
                        }
                    }
                    accum(inner, b, &db);
                }
            }
        }
        BackOp::ConvTranspose2d { x, w, bias, stride } => {
            let xs = inner.nodes[x].shape.clone();
            let ws = inner.nodes[w].shape.clone();
            let os = inner.nodes[i].shape.clone();
            let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ws[1], ws[2]);
            let (oh, ow) = (os[2], os[3]);
            if needs(inner, x) {
                let wdat = &inner.nodes[w].data;
                let dx = conv::conv_transpose2d_backward_x(
                    &g, wdat, n, cin, h, wd, cout, k, stride, oh, ow,
                );
                accum(inner, x, &dx);
            }
            if needs(inner, w) {
                let xd = &inner.nodes[x].data;
                let dw = conv::conv_transpose2d_backward_w(
                    &g, xd, n, cin, h, wd, cout, k, stride, oh, ow,
                );
                accum(inner, w, &dw);
            }
            if let Some(b) = bias {
                if needs(inner, b) {
                    let mut db = vec![0.0; cout];
                    for ni in 0..n {
                        for co in 0..cout {
                            let off = (ni * cout + co) * oh * ow;
                            db[co] += g[off..off + oh * ow].iter().sum::<f64>();
                        }
                    }
                    accum(inner, b, &db);
                }
            }
        }
        BackOp::Permute { x, perm } => {
            if needs(inner, x) {
                let out_shape = inner.nodes[i].shape.clone();
                let inv = invert_perm(&perm);
                let dx = permute_data(&g, &out_shape, &inv);
                accum(inner, x, &dx);
            }
        }
        BackOp::Reshape(x) => {
            accum(inner, x, &g);
        }
        BackOp::Gather { x, idx } => {
            if needs(inner, x) {
                let mut dx = vec![0.0; inner.nodes[x].data.len()];
                for (&src, gv) in idx.iter().zip(g.iter()) {
                    dx[src] += gv;
                }
                accum(inner, x, &dx);
            }
        }
        BackOp::Concat { parts, axis } => {
            let out_shape = inner.nodes[i].shape.clone();
            let (outer, total, in_) = axis_spans(&out_shape, axis);
            let mut offset = 0;
            for &(pid, len) in parts.iter() {
                if needs(inner, pid) {
                    let mut dp = vec![0.0; outer * len * in_];
                    for o in 0..outer {
                        let src_base = (o * total + offset) * in_;
                        let dst_base = o * len * in_;
                        dp[dst_base..dst_base + len * in_]
                            .copy_from_slice(&g[src_base..src_base + len * in_]);
                    }
                    accum(inner, pid, &dp);
                }
                offset += len;
            }
        }
        BackOp::CrossEntropy {
            logits,
            target,
            ignore_index,
            evaluated,
        } => {
            if needs(inner, logits) && evaluated == 0 {
                // all pixels ignored: defined as zero loss with zero grads
                let zeros = vec![0.0; inner.nodes[logits].data.len()];
                accum(inner, logits, &zeros);
            } else if needs(inner, logits) {
                let shape = inner.nodes[logits].shape.clone();
                let (n, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let xd = &inner.nodes[logits].data;
                let mut dx = vec![0.0; xd.len()];
                let scale = g[0] / evaluated as f64;
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let t = target[(ni * h + y) * w + xx];
                            if t == ignore_index {
                                continue;
                            }
                            let mut mx = f64::NEG_INFINITY;
                            for c in 0..l {
                                mx = mx.max(xd[((ni * l + c) * h + y) * w + xx]);
                            }
                            let mut z = 0.0;
                            for c in 0..l {
                                z += (xd[((ni * l + c) * h + y) * w + xx] - mx).exp();
                            }
                            for c in 0..l {
                                let p = (xd[((ni * l + c) * h + y) * w + xx] - mx).exp() / z;
                                let onehot = if c == t as usize { 1.0 } else { 0.0 };
                                dx[((ni * l + c) * h + y) * w + xx] = scale * (p - onehot);
                            }
                        }
                    }
                }
                accum(inner, logits, &dx);
            }
        }
    }
}
