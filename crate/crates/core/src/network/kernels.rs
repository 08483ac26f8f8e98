//! Forward and backward kernels on raw `[n, c, d, h, w]` buffers.

use super::tensor::{gemm, Mat, Real};

/// Upper bound on the im2col buffer, in elements. Small enough that the
/// column slab is still in cache when the GEMM reads it; in practice one
/// output plane per slab.
const COL_BUDGET: usize = 1 << 16;

pub const BN_EPS: f64 = 1e-5;

/// Geometry of a "same"-padded cubic convolution on one sample.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dil: usize,
    pub dhw: [usize; 3],
}

impl ConvShape {
    fn spatial(&self) -> usize {
        self.dhw[0] * self.dhw[1] * self.dhw[2]
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn pad(&self) -> isize {
        (self.dil * (self.k - 1) / 2) as isize
    }

    /// Output slices per im2col slab.
    fn slab(&self) -> usize {
        let plane = self.dhw[1] * self.dhw[2];
        (COL_BUDGET / (self.rows() * plane)).clamp(1, self.dhw[0])
    }
}

/// Valid output range `[lo, hi)` along an axis for a tap offset `off`.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], s: &ConvShape, z0: usize, z1: usize, col: &mut [T]) {
    let [_, h, w] = s.dhw;
    let plane = h * w;
    let p = (z1 - z0) * plane;
    let k = s.k;
    let pad = s.pad();
    let d = s.dil as isize;
    let mut r = 0;
    for ci in 0..s.cin {
        let xc = &x[ci * s.spatial()..(ci + 1) * s.spatial()];
        for kz in 0..k {
            let dz = kz as isize * d - pad;
            for ky in 0..k {
                let dy = ky as isize * d - pad;
                let (ylo, yhi) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize * d - pad;
                    let (xlo, xhi) = valid_range(w, dx);
                    let row = &mut col[r * p..(r + 1) * p];
                    for z in z0..z1 {
                        let dst = &mut row[(z - z0) * plane..(z - z0 + 1) * plane];
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= s.dhw[0] as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_plane = &xc[sz as usize * plane..(sz as usize + 1) * plane];
                        dst[..ylo * w].fill(T::zero());
                        dst[yhi * w..].fill(T::zero());
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w..(y + 1) * w];
                            drow[..xlo].fill(T::zero());
                            drow[xhi..].fill(T::zero());
                            if xlo < xhi {
                                let sx0 = (xlo as isize + dx) as usize;
                                drow[xlo..xhi].copy_from_slice(&src_plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)]);
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], s: &ConvShape, z0: usize, z1: usize, dx_out: &mut [T]) {
    let [_, h, w] = s.dhw;
    let plane = h * w;
    let p = (z1 - z0) * plane;
    let k = s.k;
    let pad = s.pad();
    let d = s.dil as isize;
    let mut r = 0;
    let spatial = s.spatial();
    for ci in 0..s.cin {
        let xc = &mut dx_out[ci * spatial..(ci + 1) * spatial];
        for kz in 0..k {
            let dz = kz as isize * d - pad;
            for ky in 0..k {
                let dy = ky as isize * d - pad;
                let (ylo, yhi) = valid_range(h, dy);
                for kx in 0..k {
                    let dxo = kx as isize * d - pad;
                    let (xlo, xhi) = valid_range(w, dxo);
                    let row = &col[r * p..(r + 1) * p];
                    r += 1;
                    if xlo >= xhi {
                        continue;
                    }
                    for z in z0..z1 {
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= s.dhw[0] as isize {
                            continue;
                        }
                        let src = &row[(z - z0) * plane..(z - z0 + 1) * plane];
                        let dst_plane = &mut xc[sz as usize * plane..(sz as usize + 1) * plane];
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (xlo as isize + dxo) as usize;
                            let dst = &mut dst_plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                            for (o, &v) in dst.iter_mut().zip(&src[y * w + xlo..y * w + xhi]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a whole batch. `x` is `[n, cin, S]`, `weight` is
/// `[cout, cin * k^3]`; returns `[n, cout, S]`.
pub fn conv3d_forward<T: Real>(x: &[T], n: usize, s: &ConvShape, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let sp = s.spatial();
    let mut out = vec![T::zero(); n * s.cout * sp];
    let rows = s.rows();
    let plane = s.dhw[1] * s.dhw[2];
    let mut col = if s.k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); rows * s.slab() * plane]
    };
    for b in 0..n {
        let xb = &x[b * s.cin * sp..(b + 1) * s.cin * sp];
        let ob = &mut out[b * s.cout * sp..(b + 1) * s.cout * sp];
        if s.k == 1 {
            gemm(
                s.cout,
                sp,
                s.cin,
                T::one(),
                Mat::new(weight, s.cin),
                Mat::new(xb, sp),
                T::zero(),
                ob,
                sp,
            );
        } else {
            let slab = s.slab();
            let mut z0 = 0;
            while z0 < s.dhw[0] {
                let z1 = (z0 + slab).min(s.dhw[0]);
                let p = (z1 - z0) * plane;
                im2col(xb, s, z0, z1, &mut col[..rows * p]);
                gemm(
                    s.cout,
                    p,
                    rows,
                    T::one(),
                    Mat::new(weight, rows),
                    Mat::new(&col[..rows * p], p),
                    T::zero(),
                    &mut ob[z0 * plane..],
                    sp,
                );
                z0 = z1;
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut ob[c * sp..(c + 1) * sp] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Backward convolution. Accumulates into `dweight` / `dbias` and returns the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &[T],
    n: usize,
    s: &ConvShape,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> Vec<T> {
    let sp = s.spatial();
    let rows = s.rows();
    let plane = s.dhw[1] * s.dhw[2];
    let mut dx = vec![T::zero(); n * s.cin * sp];
    let slab = s.slab();
    let (mut col, mut dcol) = if s.k == 1 {
        (Vec::new(), Vec::new())
    } else {
        (
            vec![T::zero(); rows * slab * plane],
            vec![T::zero(); rows * slab * plane],
        )
    };
    for b in 0..n {
        let xb = &x[b * s.cin * sp..(b + 1) * s.cin * sp];
        let dyb = &dy[b * s.cout * sp..(b + 1) * s.cout * sp];
        let dxb = &mut dx[b * s.cin * sp..(b + 1) * s.cin * sp];
        if s.k == 1 {
            gemm(
                s.cout,
                s.cin,
                sp,
                T::one(),
                Mat::new(dyb, sp),
                Mat::t(xb, sp),
                T::one(),
                dweight,
                s.cin,
            );
            gemm(
                s.cin,
                sp,
                s.cout,
                T::one(),
                Mat::t(weight, s.cin),
                Mat::new(dyb, sp),
                T::zero(),
                dxb,
                sp,
            );
        } else {
            let mut z0 = 0;
            while z0 < s.dhw[0] {
                let z1 = (z0 + slab).min(s.dhw[0]);
                let p = (z1 - z0) * plane;
                let colp = &mut col[..rows * p];
                im2col(xb, s, z0, z1, colp);
                let dys = &dyb[z0 * plane..];
                gemm(
                    s.cout,
                    rows,
                    p,
                    T::one(),
                    Mat::new(dys, sp),
                    Mat::t(colp, p),
                    T::one(),
                    dweight,
                    rows,
                );
                let dcolp = &mut dcol[..rows * p];
                gemm(
                    rows,
                    p,
                    s.cout,
                    T::one(),
                    Mat::t(weight, rows),
                    Mat::new(dys, sp),
                    T::zero(),
                    dcolp,
                    p,
                );
                col2im(dcolp, s, z0, z1, dxb);
                z0 = z1;
            }
        }
    }
    if let Some(db) = dbias {
        bias_grad(dy, n, s.cout, sp, db);
    }
    dx
}

pub fn bias_grad<T: Real>(dy: &[T], n: usize, c: usize, sp: usize, db: &mut [T]) {
    for b in 0..n {
        for (ch, dbv) in db.iter_mut().enumerate() {
            let start = (b * c + ch) * sp;
            *dbv += dy[start..start + sp].iter().copied().sum::<T>();
        }
    }
}

/// Per-channel batch mean and biased variance over `[n, c, S]`.
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, sp: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * sp) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * sp;
            s += x[start..start + sp].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * sp;
            q += x[start..start + sp]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`, channelwise.
#[allow(clippy::too_many_arguments)]
pub fn affine_channels<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    sp: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = T::of(gamma[ch].as_f64() * inv_std[ch]);
            let shift = T::of(beta[ch].as_f64() - gamma[ch].as_f64() * inv_std[ch] * mean[ch]);
            let start = (b * c + ch) * sp;
            for (o, &v) in y[start..start + sp].iter_mut().zip(&x[start..start + sp]) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

/// Batch-norm backward in training mode. Returns `dx` and accumulates
/// `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    sp: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let m = (n * sp) as f64;
    let mut dx = vec![T::zero(); x.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * sp;
            for (&xv, &g) in x[start..start + sp].iter().zip(&dy[start..start + sp]) {
                let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                sum_dy += g.as_f64();
                sum_dy_xhat += g.as_f64() * xhat;
            }
        }
        dgamma[ch] += T::of(sum_dy_xhat);
        dbeta[ch] += T::of(sum_dy);
        let k = gamma[ch].as_f64() * inv_std[ch] / m;
        for b in 0..n {
            let start = (b * c + ch) * sp;
            for i in start..start + sp {
                let xhat = (x[i].as_f64() - mean[ch]) * inv_std[ch];
                dx[i] = T::of(k * (m * dy[i].as_f64() - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    dx
}

/// 2x2x2 max pooling with stride 2. Returns output and, per output element,
/// the flat index of the winning input element.
pub fn max_pool2<T: Real>(x: &[T], nc: usize, dhw: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let [d, h, w] = dhw;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let osp = od * oh * ow;
    let sp = d * h * w;
    let mut out = vec![T::zero(); nc * osp];
    let mut arg = vec![0u32; nc * osp];
    for plane in 0..nc {
        let xb = &x[plane * sp..(plane + 1) * sp];
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let base = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo;
                            for dx in 0..2 {
                                let v = xb[base + dx];
                                if v > best {
                                    best = v;
                                    best_i = base + dx;
                                }
                            }
                        }
                    }
                    let o = plane * osp + (z * oh + y) * ow + xo;
                    out[o] = best;
                    arg[o] = (plane * sp + best_i) as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

/// Linear x2 upsampling along the middle axis of `[outer, len, inner]`
/// (half-pixel centers, edge-clamped).
fn upsample_axis<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let q = T::of(0.25);
    let tq = T::of(0.75);
    let mut out = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for i in 0..len {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(len - 1);
            let c = &src[i * inner..(i + 1) * inner];
            let p = &src[prev * inner..(prev + 1) * inner];
            let nx = &src[next * inner..(next + 1) * inner];
            for t in 0..inner {
                dst[(2 * i) * inner + t] = tq * c[t] + q * p[t];
                dst[(2 * i + 1) * inner + t] = tq * c[t] + q * nx[t];
            }
        }
    }
    out
}

fn upsample_axis_backward<T: Real>(dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let q = T::of(0.25);
    let tq = T::of(0.75);
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let g = &dy[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let d = &mut dx[o * len * inner..(o + 1) * len * inner];
        for i in 0..len {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(len - 1);
            for t in 0..inner {
                let ge = g[(2 * i) * inner + t];
                let go = g[(2 * i + 1) * inner + t];
                d[i * inner + t] += tq * (ge + go);
                d[prev * inner + t] += q * ge;
                d[next * inner + t] += q * go;
            }
        }
    }
    dx
}

/// Trilinear x2 upsampling of `[nc, d, h, w]`.
pub fn upsample2<T: Real>(x: &[T], nc: usize, dhw: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dhw;
    let a = upsample_axis(x, nc * d * h, w, 1);
    let b = upsample_axis(&a, nc * d, h, 2 * w);
    upsample_axis(&b, nc, d, 4 * h * w)
}

pub fn upsample2_backward<T: Real>(dy: &[T], nc: usize, dhw: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dhw;
    let b = upsample_axis_backward(dy, nc, d, 4 * h * w);
    let a = upsample_axis_backward(&b, nc * d, h, 2 * w);
    upsample_axis_backward(&a, nc * d * h, w, 1)
}
