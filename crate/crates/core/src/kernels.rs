//! Raw numeric kernels behind the graph operations. No shape validation here;
//! the graph layer checks shapes before calling in.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Output columns `ow` whose input column `ow*stride + k - pad` is in bounds.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest ow with ow*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ow with ow*s + off <= w-1
        let hi_num = self.w as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, self.ow as isize) as usize;
        (lo.min(hi), hi)
    }

    fn input_row(&self, out_row: usize, k: usize) -> Option<usize> {
        let r = (out_row * self.stride + k) as isize - self.pad as isize;
        (r >= 0 && (r as usize) < self.h).then_some(r as usize)
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let cols: Vec<(usize, usize)> = (0..g.kw).map(|k| g.valid_cols(k)).collect();
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * out_plane..(n * g.o + o + 1) * out_plane];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + kh) * g.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = cols[kw];
                        if lo >= hi {
                            continue;
                        }
                        for orow in 0..g.oh {
                            let Some(irow) = g.input_row(orow, kh) else { continue };
                            let drow = &mut dst[orow * g.ow..(orow + 1) * g.ow];
                            let srow = &src[irow * g.w..(irow + 1) * g.w];
                            if g.stride == 1 {
                                let base = lo + kw - g.pad;
                                for (d, s) in drow[lo..hi].iter_mut().zip(&srow[base..base + hi - lo]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ocol in lo..hi {
                                    drow[ocol] += wv * srow[ocol * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] in its input: scatters output gradients back.
pub(crate) fn conv2d_input_grad(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let cols: Vec<(usize, usize)> = (0..g.kw).map(|k| g.valid_cols(k)).collect();
    for n in 0..g.n {
        for c in 0..g.c {
            let dst = &mut gx[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
            for o in 0..g.o {
                let src = &gy[(n * g.o + o) * out_plane..(n * g.o + o + 1) * out_plane];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + kh) * g.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = cols[kw];
                        if lo >= hi {
                            continue;
                        }
                        for orow in 0..g.oh {
                            let Some(irow) = g.input_row(orow, kh) else { continue };
                            let srow = &src[orow * g.ow..(orow + 1) * g.ow];
                            let drow = &mut dst[irow * g.w..(irow + 1) * g.w];
                            if g.stride == 1 {
                                let base = lo + kw - g.pad;
                                for (d, s) in drow[base..base + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ocol in lo..hi {
                                    drow[ocol * g.stride + kw - g.pad] += wv * srow[ocol];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of [`conv2d`] in its kernel: correlates inputs with output gradients.
pub(crate) fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0; g.o * g.c * g.kh * g.kw];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let cols: Vec<(usize, usize)> = (0..g.kw).map(|k| g.valid_cols(k)).collect();
    for n in 0..g.n {
        for o in 0..g.o {
            let gsrc = &gy[(n * g.o + o) * out_plane..(n * g.o + o + 1) * out_plane];
            for c in 0..g.c {
                let xsrc = &x[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let (lo, hi) = cols[kw];
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for orow in 0..g.oh {
                            let Some(irow) = g.input_row(orow, kh) else { continue };
                            let grow = &gsrc[orow * g.ow..(orow + 1) * g.ow];
                            let xrow = &xsrc[irow * g.w..(irow + 1) * g.w];
                            if g.stride == 1 {
                                let base = lo + kw - g.pad;
                                acc += grow[lo..hi]
                                    .iter()
                                    .zip(&xrow[base..base + hi - lo])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ocol in lo..hi {
                                    acc += grow[ocol] * xrow[ocol * g.stride + kw - g.pad];
                                }
                            }
                        }
                        gw[((o * g.c + c) * g.kh + kh) * g.kw + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let src = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for r in 0..h {
            for col in 0..w {
                dp[(r / k) * ow + col / k] += sp[r * w + col];
            }
        }
        dp.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_raw(vec![n, c, oh, ow], out)
}

/// Adjoint of [`avg_pool`]: spreads each value uniformly over its window.
pub(crate) fn avg_pool_adjoint(g: &Tensor, k: usize) -> Tensor {
    let s = g.shape();
    let (n, c, oh, ow) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (oh * k, ow * k);
    let scale = 1.0 / (k * k) as f64;
    let src = g.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let sp = &src[plane * oh * ow..(plane + 1) * oh * ow];
        let dp = &mut out[plane * h * w..(plane + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                dp[r * w + col] = sp[(r / k) * ow + col / k] * scale;
            }
        }
    }
    Tensor::from_raw(vec![n, c, h, w], out)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_raw(vec![n, m], out)
}

/// Sums `x` down to `target`, which has the same rank with extents either
/// equal to `x`'s or 1.
pub(crate) fn sum_to(x: &Tensor, target: &[usize]) -> Tensor {
    let src_shape = x.shape();
    let rank = src_shape.len();
    let mut out = vec![0.0; target.iter().product()];
    let mut idx = vec![0usize; rank];
    for &v in x.data() {
        let mut flat = 0;
        for d in 0..rank {
            let i = if target[d] == 1 { 0 } else { idx[d] };
            flat = flat * target[d] + i;
        }
        out[flat] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_raw(target.to_vec(), out)
}

/// Repeats `x` along its unit extents up to `target`.
pub(crate) fn broadcast_to(x: &Tensor, target: &[usize]) -> Tensor {
    let src_shape = x.shape();
    let rank = target.len();
    let numel: usize = target.iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let mut flat = 0;
        for d in 0..rank {
            let i = if src_shape[d] == 1 { 0 } else { idx[d] };
            flat = flat * src_shape[d] + i;
        }
        out.push(src[flat]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_raw(target.to_vec(), out)
}
