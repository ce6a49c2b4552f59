//! Layer compute kernels: forward and backward passes.
//!
//! All kernels are deterministic: every output element is produced by
//! exactly one task with a fixed inner summation order, so results are
//! bit-identical regardless of thread count. Reductions spanning more
//! than ~1e5 terms (batch-norm statistics, weight gradients) accumulate
//! in f64.

use rayon::prelude::*;

use crate::tensor::Tensor;

/// 3D convolution, stride 1, symmetric same-padding (odd kernels only).
/// `x` is (b, ic, d, h, w); `weight` is (oc, ic, kd, kh, kw).
pub fn conv3d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let [b, ic, d, h, w] = x.dims5();
    let ws = weight.shape();
    let (oc, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (rd, rh, rw) = (kd / 2, kh / 2, kw / 2);
    let plane = h * w;
    let vol = d * plane;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();

    let mut out = Tensor::zeros(&[b, oc, d, h, w]);
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(slab, orow)| {
            let z = slab % d;
            let bo = slab / d;
            let o = bo % oc;
            let bi = bo / oc;
            orow.fill(bd[o]);
            for i in 0..ic {
                let xbase = (bi * ic + i) * vol;
                let wbase = (o * ic + i) * kd * kh * kw;
                for kz in 0..kd {
                    let sz = z as isize + kz as isize - rd as isize;
                    if sz < 0 || sz >= d as isize {
                        continue;
                    }
                    let xz = xbase + sz as usize * plane;
                    for ky in 0..kh {
                        let oy = ky as isize - rh as isize;
                        let y_lo = 0.max(-oy) as usize;
                        let y_hi = h.min((h as isize - oy) as usize);
                        for kx in 0..kw {
                            let ox = kx as isize - rw as isize;
                            let x_lo = 0.max(-ox) as usize;
                            let x_hi = w.min((w as isize - ox) as usize);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let wv = wd[wbase + (kz * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let src = xz + (y as isize + oy) as usize * w;
                                let orow_y = &mut orow[y * w + x_lo..y * w + x_hi];
                                let xoff = (src as isize + ox + x_lo as isize) as usize;
                                let xrow = &xd[xoff..xoff + (x_hi - x_lo)];
                                for (ovl, &xv) in orow_y.iter_mut().zip(xrow) {
                                    *ovl += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradients of a conv layer: (dx, dweight, dbias).
pub fn conv3d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [b, ic, d, h, w] = x.dims5();
    let ws = weight.shape();
    let (oc, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (rd, rh, rw) = (kd / 2, kh / 2, kw / 2);
    let plane = h * w;
    let vol = d * plane;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();

    // dX[i, q] = sum_{o, k} W[o, i, k] * dY[o, q + r - k]
    let mut dx = Tensor::zeros(&[b, ic, d, h, w]);
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(slab, xrow)| {
            let z = slab % d;
            let bi_i = slab / d;
            let i = bi_i % ic;
            let bi = bi_i / ic;
            for o in 0..oc {
                let dybase = (bi * oc + o) * vol;
                let wbase = (o * ic + i) * kd * kh * kw;
                for kz in 0..kd {
                    let sz = z as isize + rd as isize - kz as isize;
                    if sz < 0 || sz >= d as isize {
                        continue;
                    }
                    let dyz = dybase + sz as usize * plane;
                    for ky in 0..kh {
                        let oy = rh as isize - ky as isize;
                        let y_lo = 0.max(-oy) as usize;
                        let y_hi = h.min((h as isize - oy) as usize);
                        for kx in 0..kw {
                            let ox = rw as isize - kx as isize;
                            let x_lo = 0.max(-ox) as usize;
                            let x_hi = w.min((w as isize - ox) as usize);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let wv = wd[wbase + (kz * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let src = dyz + (y as isize + oy) as usize * w;
                                let xr = &mut xrow[y * w + x_lo..y * w + x_hi];
                                let dyoff = (src as isize + ox + x_lo as isize) as usize;
                                let dyr = &dyd[dyoff..dyoff + (x_hi - x_lo)];
                                for (g, &dv) in xr.iter_mut().zip(dyr) {
                                    *g += wv * dv;
                                }
                            }
                        }
                    }
                }
            }
        });

    // dW[o, i, k] = sum_{b, p} dY[o, p] * X[i, p + k - r], accumulated in f64
    let ktap = kd * kh * kw;
    let mut dw = Tensor::zeros(&[oc, ic, kd, kh, kw]);
    dw.data_mut()
        .par_chunks_mut(ic * ktap)
        .enumerate()
        .for_each(|(o, wrow)| {
            for i in 0..ic {
                for kz in 0..kd {
                    for ky in 0..kh {
                        let oy = ky as isize - rh as isize;
                        let y_lo = 0.max(-oy) as usize;
                        let y_hi = h.min((h as isize - oy) as usize);
                        for kx in 0..kw {
                            let ox = kx as isize - rw as isize;
                            let x_lo = 0.max(-ox) as usize;
                            let x_hi = w.min((w as isize - ox) as usize);
                            let mut acc = 0.0f64;
                            if x_lo < x_hi {
                                for bi in 0..b {
                                    let dybase = (bi * oc + o) * vol;
                                    let xbase = (bi * ic + i) * vol;
                                    for z in 0..d {
                                        let sz = z as isize + kz as isize - rd as isize;
                                        if sz < 0 || sz >= d as isize {
                                            continue;
                                        }
                                        let dyz = dybase + z * plane;
                                        let xz = xbase + sz as usize * plane;
                                        for y in y_lo..y_hi {
                                            let dyr = &dyd
                                                [dyz + y * w + x_lo..dyz + y * w + x_hi];
                                            let xoff = (xz as isize
                                                + (y as isize + oy) * w as isize
                                                + ox
                                                + x_lo as isize)
                                                as usize;
                                            let xr = &xd[xoff..xoff + (x_hi - x_lo)];
                                            let mut row = 0.0f32;
                                            for (&dv, &xv) in dyr.iter().zip(xr) {
                                                row += dv * xv;
                                            }
                                            acc += row as f64;
                                        }
                                    }
                                }
                            }
                            wrow[(i * kd + kz) * kh * kw + ky * kw + kx] = acc as f32;
                        }
                    }
                }
            }
        });

    let mut db = Tensor::zeros(&[oc]);
    db.data_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(o, g)| {
            let mut acc = 0.0f64;
            for bi in 0..b {
                let base = (bi * oc + o) * vol;
                for &v in &dyd[base..base + vol] {
                    acc += v as f64;
                }
            }
            *g = acc as f32;
        });

    (dx, dw, db)
}

/// Per-channel mean and biased variance over batch and spatial dims.
pub fn bn_batch_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let [b, c, d, h, w] = x.dims5();
    let vol = d * h * w;
    let n = (b * vol) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    mean.par_iter_mut()
        .zip(var.par_iter_mut())
        .enumerate()
        .for_each(|(ch, (m, v))| {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * vol;
                for &xv in &xd[base..base + vol] {
                    let xv = xv as f64;
                    s += xv;
                    s2 += xv * xv;
                }
            }
            let mu = s / n;
            *m = mu as f32;
            *v = ((s2 / n - mu * mu).max(0.0)) as f32;
        });
    (mean, var)
}

/// Normalize with the given per-channel stats and affine params.
pub fn bn_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Tensor {
    let [b, c, d, h, w] = x.dims5();
    let vol = d * h * w;
    let xd = x.data();
    let g = gamma.data();
    let be = beta.data();
    let mut out = Tensor::zeros(&[b, c, d, h, w]);
    out.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(bc, orow)| {
            let ch = bc % c;
            let invstd = 1.0 / (var[ch] + eps).sqrt();
            let scale = g[ch] * invstd;
            let shift = be[ch] - mean[ch] * scale;
            let base = bc * vol;
            for (o, &xv) in orow.iter_mut().zip(&xd[base..base + vol]) {
                *o = xv * scale + shift;
            }
        });
    out
}

/// Backward through batch statistics (stats are a function of `x`).
pub fn bn_backward_batch(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f32],
    var: &[f32],
    eps: f32,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, d, h, w] = x.dims5();
    let vol = d * h * w;
    let n = (b * vol) as f64;
    let xd = x.data();
    let dyd = dy.data();
    let g = gamma.data();

    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut mean_dy = vec![0.0f32; c];
    let mut mean_dy_xhat = vec![0.0f32; c];
    dgamma
        .par_iter_mut()
        .zip(dbeta.par_iter_mut())
        .zip(mean_dy.par_iter_mut().zip(mean_dy_xhat.par_iter_mut()))
        .enumerate()
        .for_each(|(ch, ((dg, db), (mdy, mdyx)))| {
            let invstd = 1.0 / ((var[ch] + eps) as f64).sqrt();
            let mu = mean[ch] as f64;
            let mut s_dy = 0.0f64;
            let mut s_dy_xhat = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * vol;
                for k in 0..vol {
                    let dv = dyd[base + k] as f64;
                    let xhat = (xd[base + k] as f64 - mu) * invstd;
                    s_dy += dv;
                    s_dy_xhat += dv * xhat;
                }
            }
            *dg = s_dy_xhat as f32;
            *db = s_dy as f32;
            *mdy = (s_dy / n) as f32;
            *mdyx = (s_dy_xhat / n) as f32;
        });

    let mut dx = Tensor::zeros(&[b, c, d, h, w]);
    dx.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(bc, xrow)| {
            let ch = bc % c;
            let invstd = 1.0 / (var[ch] + eps).sqrt();
            let scale = g[ch] * invstd;
            let mu = mean[ch];
            let base = bc * vol;
            for (k, gx) in xrow.iter_mut().enumerate() {
                let xhat = (xd[base + k] - mu) * invstd;
                *gx = scale * (dyd[base + k] - mean_dy[ch] - xhat * mean_dy_xhat[ch]);
            }
        });
    (
        dx,
        Tensor::from_vec(&[c], dgamma).unwrap(),
        Tensor::from_vec(&[c], dbeta).unwrap(),
    )
}

/// Backward with frozen stats (running statistics treated as constants).
pub fn bn_backward_frozen(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f32],
    var: &[f32],
    eps: f32,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, d, h, w] = x.dims5();
    let vol = d * h * w;
    let xd = x.data();
    let dyd = dy.data();
    let g = gamma.data();

    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    dgamma
        .par_iter_mut()
        .zip(dbeta.par_iter_mut())
        .enumerate()
        .for_each(|(ch, (dg, db))| {
            let invstd = 1.0 / ((var[ch] + eps) as f64).sqrt();
            let mu = mean[ch] as f64;
            let mut s_dy = 0.0f64;
            let mut s_dy_xhat = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * vol;
                for k in 0..vol {
                    let dv = dyd[base + k] as f64;
                    s_dy += dv;
                    s_dy_xhat += dv * (xd[base + k] as f64 - mu) * invstd;
                }
            }
            *dg = s_dy_xhat as f32;
            *db = s_dy as f32;
        });

    let mut dx = Tensor::zeros(&[b, c, d, h, w]);
    dx.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(bc, xrow)| {
            let ch = bc % c;
            let scale = g[ch] / (var[ch] + eps).sqrt();
            let base = bc * vol;
            for (k, gx) in xrow.iter_mut().enumerate() {
                *gx = scale * dyd[base + k];
            }
        });
    (
        dx,
        Tensor::from_vec(&[c], dgamma).unwrap(),
        Tensor::from_vec(&[c], dbeta).unwrap(),
    )
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Zero gradient at negative and exactly-zero pre-activations.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// 2x2x2 max pooling, stride 2. Returns output and per-output argmax as a
/// flat spatial index into the input volume (ties take the first element
/// in (z, y, x) scan order).
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [b, c, d, h, w] = x.dims5();
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    let vol = d * h * w;
    let xd = x.data();
    let mut out = Tensor::zeros(&[b, c, d2, h2, w2]);
    let mut argmax = vec![0u32; b * c * d2 * h2 * w2];
    let od = out.data_mut();
    let mut oi = 0usize;
    for bc in 0..b * c {
        let base = bc * vol;
        for z in 0..d2 {
            for y in 0..h2 {
                for xh in 0..w2 {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dz in 0..2 {
                        for dyk in 0..2 {
                            for dxk in 0..2 {
                                let spatial =
                                    ((2 * z + dz) * h + (2 * y + dyk)) * w + (2 * xh + dxk);
                                let v = xd[base + spatial];
                                if v > best {
                                    best = v;
                                    best_idx = spatial as u32;
                                }
                            }
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(x_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let [b, c, d, h, w] = dx.dims5();
    let vol = d * h * w;
    let out_vol = dy.numel() / (b * c);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for bc in 0..b * c {
        let base = bc * vol;
        let obase = bc * out_vol;
        for k in 0..out_vol {
            dxd[base + argmax[obase + k] as usize] += dyd[obase + k];
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let [b, c, d, h, w] = x.dims5();
    let (d2, h2, w2) = (d * 2, h * 2, w * 2);
    let vol = d * h * w;
    let xd = x.data();
    let mut out = Tensor::zeros(&[b, c, d2, h2, w2]);
    let od = out.data_mut();
    let mut oi = 0usize;
    for bc in 0..b * c {
        let base = bc * vol;
        for z in 0..d2 {
            for y in 0..h2 {
                let src = base + ((z / 2) * h + y / 2) * w;
                for xh in 0..w2 {
                    od[oi] = xd[src + xh / 2];
                    oi += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let [b, c, d, h, w] = dx.dims5();
    let vol = d * h * w;
    let (d2, h2, w2) = (d * 2, h * 2, w * 2);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let mut oi = 0usize;
    for bc in 0..b * c {
        let base = bc * vol;
        for z in 0..d2 {
            for y in 0..h2 {
                let dst = base + ((z / 2) * h + y / 2) * w;
                for xh in 0..w2 {
                    dxd[dst + xh / 2] += dyd[oi];
                    oi += 1;
                }
            }
        }
    }
    dx
}

/// Channel-wise softmax per voxel (max-shifted for stability).
pub fn softmax_forward(x: &Tensor) -> Tensor {
    let [b, c, d, h, w] = x.dims5();
    let vol = d * h * w;
    let xd = x.data();
    let mut out = Tensor::zeros(&[b, c, d, h, w]);
    let od = out.data_mut();
    for bi in 0..b {
        let base = bi * c * vol;
        for k in 0..vol {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xd[base + ch * vol + k]);
            }
            let mut s = 0.0f32;
            for ch in 0..c {
                let e = (xd[base + ch * vol + k] - m).exp();
                od[base + ch * vol + k] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for ch in 0..c {
                od[base + ch * vol + k] *= inv;
            }
        }
    }
    out
}

/// Jacobian-vector product of softmax: dx_c = p_c (dy_c - sum_k dy_k p_k).
pub fn softmax_backward(p: &Tensor, dy: &Tensor) -> Tensor {
    let [b, c, d, h, w] = p.dims5();
    let vol = d * h * w;
    let pd = p.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(&[b, c, d, h, w]);
    let dxd = dx.data_mut();
    for bi in 0..b {
        let base = bi * c * vol;
        for k in 0..vol {
            let mut dot = 0.0f32;
            for ch in 0..c {
                dot += dyd[base + ch * vol + k] * pd[base + ch * vol + k];
            }
            for ch in 0..c {
                let idx = base + ch * vol + k;
                dxd[idx] = pd[idx] * (dyd[idx] - dot);
            }
        }
    }
    dx
}

/// Channel concatenation: (b, ca, ...) ++ (b, cb, ...) -> (b, ca+cb, ...).
pub fn concat_forward(a: &Tensor, bsrc: &Tensor) -> Tensor {
    let [b, ca, d, h, w] = a.dims5();
    let cb = bsrc.dims5()[1];
    let vol = d * h * w;
    let mut out = Tensor::zeros(&[b, ca + cb, d, h, w]);
    let od = out.data_mut();
    for bi in 0..b {
        let dst = bi * (ca + cb) * vol;
        od[dst..dst + ca * vol].copy_from_slice(&a.data()[bi * ca * vol..(bi + 1) * ca * vol]);
        od[dst + ca * vol..dst + (ca + cb) * vol]
            .copy_from_slice(&bsrc.data()[bi * cb * vol..(bi + 1) * cb * vol]);
    }
    out
}

pub fn concat_backward(dy: &Tensor, ca: usize, cb: usize) -> (Tensor, Tensor) {
    let [b, _, d, h, w] = dy.dims5();
    let vol = d * h * w;
    let mut da = Tensor::zeros(&[b, ca, d, h, w]);
    let mut db = Tensor::zeros(&[b, cb, d, h, w]);
    for bi in 0..b {
        let src = bi * (ca + cb) * vol;
        da.data_mut()[bi * ca * vol..(bi + 1) * ca * vol]
            .copy_from_slice(&dy.data()[src..src + ca * vol]);
        db.data_mut()[bi * cb * vol..(bi + 1) * cb * vol]
            .copy_from_slice(&dy.data()[src + ca * vol..src + (ca + cb) * vol]);
    }
    (da, db)
}
