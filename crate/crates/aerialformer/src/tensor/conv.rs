//! Raw convolution kernels shared by the forward ops and their backward
//! rules. Cross-correlation semantics (no kernel flip), zero padding.

use rayon::prelude::*;

/// Output spatial extent of a strided, padded, dilated convolution.
/// Returns `None` when the geometry yields an empty output.
pub fn conv2d_out_dim(input: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output spatial extent of a transposed convolution.
pub fn conv_transpose2d_out_dim(input: usize, k: usize, stride: usize) -> usize {
    (input - 1) * stride + k
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(slab, out_plane)| {
            let ni = slab / cout;
            let co = slab % cout;
            let b = bias.map_or(0.0, |b| b[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ci in 0..cin {
                        let xoff = (ni * cin + ci) * h * wd;
                        let woff = ((co * cin + ci) * k) * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let iy = iy as usize;
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                acc += x[xoff + iy * wd + ix as usize] * w[woff + ky * k + kx];
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = acc;
                }
            }
        });
    out
}

/// Gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_x(
    g: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * cin * h * wd];
    dx.par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(slab, dx_plane)| {
            let ni = slab / cin;
            let ci = slab % cin;
            for co in 0..cout {
                let goff = (ni * cout + co) * oh * ow;
                let woff = (co * cin + ci) * k * k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[goff + oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                dx_plane[iy as usize * wd + ix as usize] += gv * w[woff + ky * k + kx];
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient w.r.t. the convolution weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_w(
    g: &[f64],
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; cout * cin * k * k];
    dw.par_chunks_mut(cin * k * k)
        .enumerate()
        .for_each(|(co, dw_slab)| {
            for ni in 0..n {
                let goff = (ni * cout + co) * oh * ow;
                for ci in 0..cin {
                    let xoff = (ni * cin + ci) * h * wd;
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix =
                                        (ox * stride + kx * dilation) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= wd {
                                        continue;
                                    }
                                    acc += g[goff + oy * ow + ox]
                                        * x[xoff + iy as usize * wd + ix as usize];
                                }
                            }
                            dw_slab[(ci * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Transposed convolution forward. Weight layout `[cin, cout, k, k]`,
/// matching the adjoint of `conv2d` with weight `[cout_conv, cin_conv, k, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(slab, out_plane)| {
            let ni = slab / cout;
            let co = slab % cout;
            if let Some(b) = bias {
                out_plane.fill(b[co]);
            }
            for ci in 0..cin {
                let xoff = (ni * cin + ci) * h * wd;
                let woff = (ci * cout + co) * k * k;
                for iy in 0..h {
                    for ix in 0..wd {
                        let xv = x[xoff + iy * wd + ix];
                        if xv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let oy = iy * stride + ky;
                            for kx in 0..k {
                                let ox = ix * stride + kx;
                                out_plane[oy * ow + ox] += xv * w[woff + ky * k + kx];
                            }
                        }
                    }
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward_x(
    g: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * cin * h * wd];
    dx.par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(slab, dx_plane)| {
            let ni = slab / cin;
            let ci = slab % cin;
            for co in 0..cout {
                let goff = (ni * cout + co) * oh * ow;
                let woff = (ci * cout + co) * k * k;
                for iy in 0..h {
                    for ix in 0..wd {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let oy = iy * stride + ky;
                            for kx in 0..k {
                                let ox = ix * stride + kx;
                                acc += g[goff + oy * ow + ox] * w[woff + ky * k + kx];
                            }
                        }
                        dx_plane[iy * wd + ix] += acc;
                    }
                }
            }
        });
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward_w(
    g: &[f64],
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; cin * cout * k * k];
    dw.par_chunks_mut(cout * k * k)
        .enumerate()
        .for_each(|(ci, dw_slab)| {
            for ni in 0..n {
                let xoff = (ni * cin + ci) * h * wd;
                for co in 0..cout {
                    let goff = (ni * cout + co) * oh * ow;
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for iy in 0..h {
                                let oy = iy * stride + ky;
                                for ix in 0..wd {
                                    acc += x[xoff + iy * wd + ix]
                                        * g[goff + oy * ow + ix * stride + kx];
                                }
                            }
                            dw_slab[(co * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });
    dw
}
