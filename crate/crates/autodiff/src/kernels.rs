//! Forward and backward kernels over flat row-major buffers.
//!
//! Every reduction runs in a fixed sequential order, so results are
//! bit-reproducible for identical inputs.

use crate::element::Element;

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + k - pad` lands
/// inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward<F: Element>(g: &ConvGeometry, input: &[F], kernel: &[F], bias: Option<&[F]>) -> Vec<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, kh, kw, s, p) = (g.height, g.width, g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut out = vec![F::zero(); g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let plane = &mut out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.in_channels {
                let src = &input[(n * g.in_channels + ci) * h * w..][..h * w];
                let ker = &kernel[(co * g.in_channels + ci) * kh * kw..][..kh * kw];
                for ki in 0..kh {
                    let (y0, y1) = valid_range(ki, p, s, h, oh);
                    for kj in 0..kw {
                        let wv = ker[ki * kw + kj];
                        let (x0, x1) = valid_range(kj, p, s, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * s + ki - p;
                            let row = &src[iy * w..][..w];
                            let orow = &mut plane[oy * ow..][..ow];
                            for ox in x0..x1 {
                                orow[ox] = orow[ox] + wv * row[ox * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward<F: Element>(
    g: &ConvGeometry,
    input: &[F],
    kernel: &[F],
    grad_out: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, kh, kw, s, p) = (g.height, g.width, g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut gi = vec![F::zero(); input.len()];
    let mut gk = vec![F::zero(); kernel.len()];
    let mut gb = vec![F::zero(); g.out_channels];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            for v in go {
                gb[co] = gb[co] + *v;
            }
            for ci in 0..g.in_channels {
                let base = (n * g.in_channels + ci) * h * w;
                let kbase = (co * g.in_channels + ci) * kh * kw;
                for ki in 0..kh {
                    let (y0, y1) = valid_range(ki, p, s, h, oh);
                    for kj in 0..kw {
                        let wv = kernel[kbase + ki * kw + kj];
                        let (x0, x1) = valid_range(kj, p, s, w, ow);
                        let mut acc = F::zero();
                        for oy in y0..y1 {
                            let iy = oy * s + ki - p;
                            for ox in x0..x1 {
                                let ix = ox * s + kj - p;
                                let gv = go[oy * ow + ox];
                                acc = acc + gv * input[base + iy * w + ix];
                                gi[base + iy * w + ix] = gi[base + iy * w + ix] + gv * wv;
                            }
                        }
                        gk[kbase + ki * kw + kj] = gk[kbase + ki * kw + kj] + acc;
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

/// Depthwise convolution: `in_channels == out_channels`, kernel `[C,1,Kh,Kw]`.
pub fn depthwise_forward<F: Element>(g: &ConvGeometry, input: &[F], kernel: &[F], bias: Option<&[F]>) -> Vec<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, kh, kw, s, p) = (g.height, g.width, g.kernel_h, g.kernel_w, g.stride, g.padding);
    let c = g.in_channels;
    let mut out = vec![F::zero(); g.batch * c * oh * ow];
    for n in 0..g.batch {
        for ch in 0..c {
            let plane = &mut out[(n * c + ch) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[ch]);
            }
            let src = &input[(n * c + ch) * h * w..][..h * w];
            let ker = &kernel[ch * kh * kw..][..kh * kw];
            for ki in 0..kh {
                let (y0, y1) = valid_range(ki, p, s, h, oh);
                for kj in 0..kw {
                    let wv = ker[ki * kw + kj];
                    let (x0, x1) = valid_range(kj, p, s, w, ow);
                    for oy in y0..y1 {
                        let row = &src[(oy * s + ki - p) * w..][..w];
                        let orow = &mut plane[oy * ow..][..ow];
                        for ox in x0..x1 {
                            orow[ox] = orow[ox] + wv * row[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<F: Element>(
    g: &ConvGeometry,
    input: &[F],
    kernel: &[F],
    grad_out: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w, kh, kw, s, p) = (g.height, g.width, g.kernel_h, g.kernel_w, g.stride, g.padding);
    let c = g.in_channels;
    let mut gi = vec![F::zero(); input.len()];
    let mut gk = vec![F::zero(); kernel.len()];
    let mut gb = vec![F::zero(); c];
    for n in 0..g.batch {
        for ch in 0..c {
            let go = &grad_out[(n * c + ch) * oh * ow..][..oh * ow];
            for v in go {
                gb[ch] = gb[ch] + *v;
            }
            let base = (n * c + ch) * h * w;
            for ki in 0..kh {
                let (y0, y1) = valid_range(ki, p, s, h, oh);
                for kj in 0..kw {
                    let wv = kernel[ch * kh * kw + ki * kw + kj];
                    let (x0, x1) = valid_range(kj, p, s, w, ow);
                    let mut acc = F::zero();
                    for oy in y0..y1 {
                        let iy = oy * s + ki - p;
                        for ox in x0..x1 {
                            let ix = ox * s + kj - p;
                            let gv = go[oy * ow + ox];
                            acc = acc + gv * input[base + iy * w + ix];
                            gi[base + iy * w + ix] = gi[base + iy * w + ix] + gv * wv;
                        }
                    }
                    gk[ch * kh * kw + ki * kw + kj] = gk[ch * kh * kw + ki * kw + kj] + acc;
                }
            }
        }
    }
    (gi, gk, gb)
}

/// `out[m, o] = bias[o] + sum_i x[m, i] * weight[o, i]`.
pub fn linear_forward<F: Element>(x: &[F], weight: &[F], bias: Option<&[F]>, d_in: usize, d_out: usize) -> Vec<F> {
    let rows = x.len() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..][..d_in];
        for o in 0..d_out {
            let wr = &weight[o * d_in..][..d_in];
            let mut acc = F::zero();
            for i in 0..d_in {
                acc = acc + xr[i] * wr[i];
            }
            out.push(match bias {
                Some(b) => acc + b[o],
                None => acc,
            });
        }
    }
    out
}

pub fn linear_backward<F: Element>(
    x: &[F],
    weight: &[F],
    grad_out: &[F],
    d_in: usize,
    d_out: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / d_in;
    let mut gx = vec![F::zero(); x.len()];
    let mut gw = vec![F::zero(); weight.len()];
    let mut gb = vec![F::zero(); d_out];
    for r in 0..rows {
        let xr = &x[r * d_in..][..d_in];
        let gr = &grad_out[r * d_out..][..d_out];
        let gxr = &mut gx[r * d_in..][..d_in];
        for o in 0..d_out {
            let go = gr[o];
            gb[o] = gb[o] + go;
            let wr = &weight[o * d_in..][..d_in];
            let gwr = &mut gw[o * d_in..][..d_in];
            for i in 0..d_in {
                gxr[i] = gxr[i] + go * wr[i];
                gwr[i] = gwr[i] + go * xr[i];
            }
        }
    }
    (gx, gw, gb)
}

/// Standard normal CDF via erf.
#[inline]
pub fn normal_cdf<F: Element>(x: F) -> F {
    let half = F::of(0.5);
    half * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu<F: Element>(x: F) -> F {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad<F: Element>(x: F) -> F {
    let pdf = (-(x * x) * F::of(0.5)).exp() * F::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    normal_cdf(x) + x * pdf
}

#[inline]
pub fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Per-group statistics of a layer norm over contiguous groups of `group` values.
pub struct NormStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm_forward<F: Element>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    group: usize,
    eps: F,
) -> (Vec<F>, NormStats<F>) {
    let rows = x.len() / group;
    let inv_n = F::one() / F::of(group as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * group..][..group];
        let mu = xr.iter().fold(F::zero(), |a, v| a + *v) * inv_n;
        let var = xr.iter().fold(F::zero(), |a, v| a + (*v - mu) * (*v - mu)) * inv_n;
        let rs = F::one() / (var + eps).sqrt();
        for (i, v) in xr.iter().enumerate() {
            out.push((*v - mu) * rs * gamma[i] + beta[i]);
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, NormStats { mean, rstd })
}

pub fn layer_norm_backward<F: Element>(
    x: &[F],
    gamma: &[F],
    stats: &NormStats<F>,
    grad_out: &[F],
    group: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / group;
    let inv_n = F::one() / F::of(group as f64);
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![F::zero(); group];
    let mut gbeta = vec![F::zero(); group];
    let mut dxhat = vec![F::zero(); group];
    let mut xhat = vec![F::zero(); group];
    for r in 0..rows {
        let xr = &x[r * group..][..group];
        let gr = &grad_out[r * group..][..group];
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_d = F::zero();
        let mut sum_dx = F::zero();
        for i in 0..group {
            xhat[i] = (xr[i] - mu) * rs;
            dxhat[i] = gr[i] * gamma[i];
            sum_d = sum_d + dxhat[i];
            sum_dx = sum_dx + dxhat[i] * xhat[i];
            gg[i] = gg[i] + gr[i] * xhat[i];
            gbeta[i] = gbeta[i] + gr[i];
        }
        let (md, mdx) = (sum_d * inv_n, sum_dx * inv_n);
        for i in 0..group {
            gx.push(rs * (dxhat[i] - md - xhat[i] * mdx));
        }
    }
    (gx, gg, gbeta)
}

/// Saved per-sample quantities of global response normalization.
pub struct GrnStats<F> {
    /// Spatial L2 energy per (n, c).
    pub energy: Vec<F>,
    /// `mean_c(energy) + eps` per n.
    pub denom: Vec<F>,
}

/// GRN over NCHW: `y = gamma * (x * n_c) + beta + x` with
/// `n_c = g_c / (mean_c g + eps)` and `g_c` the spatial L2 norm.
pub fn grn_forward<F: Element>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    eps: F,
) -> (Vec<F>, GrnStats<F>) {
    let mut out = vec![F::zero(); x.len()];
    let mut energy = Vec::with_capacity(batch * channels);
    let mut denom = Vec::with_capacity(batch);
    for n in 0..batch {
        let start = energy.len();
        for c in 0..channels {
            let xs = &x[(n * channels + c) * spatial..][..spatial];
            let ss = xs.iter().fold(F::zero(), |a, v| a + *v * *v);
            energy.push(ss.sqrt());
        }
        let mean = energy[start..].iter().fold(F::zero(), |a, v| a + *v) / F::of(channels as f64);
        let d = mean + eps;
        denom.push(d);
        for c in 0..channels {
            let nc = energy[start + c] / d;
            let off = (n * channels + c) * spatial;
            for i in 0..spatial {
                let v = x[off + i];
                out[off + i] = gamma[c] * (v * nc) + beta[c] + v;
            }
        }
    }
    (out, GrnStats { energy, denom })
}

pub fn grn_backward<F: Element>(
    x: &[F],
    gamma: &[F],
    stats: &GrnStats<F>,
    grad_out: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut gx = vec![F::zero(); x.len()];
    let mut gg = vec![F::zero(); channels];
    let mut gb = vec![F::zero(); channels];
    let cf = F::of(channels as f64);
    let mut a = vec![F::zero(); channels];
    for n in 0..batch {
        let d = stats.denom[n];
        let en = &stats.energy[n * channels..][..channels];
        // a_c = sum_p dy * gamma_c * x
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            let nc = en[c] / d;
            let mut s_dyx = F::zero();
            let mut s_dy = F::zero();
            for i in 0..spatial {
                s_dyx = s_dyx + grad_out[off + i] * x[off + i];
                s_dy = s_dy + grad_out[off + i];
            }
            gg[c] = gg[c] + s_dyx * nc;
            gb[c] = gb[c] + s_dy;
            a[c] = s_dyx * gamma[c];
        }
        let cross = (0..channels).fold(F::zero(), |acc, c| acc + a[c] * en[c]) / (cf * d * d);
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            let nc = en[c] / d;
            let d_energy = a[c] / d - cross;
            let scale = if en[c] > F::zero() { d_energy / en[c] } else { F::zero() };
            for i in 0..spatial {
                gx[off + i] = grad_out[off + i] * (gamma[c] * nc + F::one()) + scale * x[off + i];
            }
        }
    }
    (gx, gg, gb)
}

/// Row-wise `softmax(x / t)` over the trailing dimension of width `k`.
pub fn softmax_rows<F: Element>(x: &[F], k: usize, t: F) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
        let start = out.len();
        let mut sum = F::zero();
        for v in row {
            let e = ((*v - max) / t).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    out
}

/// Row-wise log-softmax of `x / t`, evaluated in f64.
pub fn log_softmax_rows_f64<F: Element>(x: &[F], k: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = row.iter().map(|v| ((v.as_f64() - max) / t).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| (v.as_f64() - max) / t - lse));
    }
    out
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Element>(x: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for k in 0..7 {
            for pad in 0..4 {
                for stride in 1..4 {
                    for in_len in 1..9 {
                        if in_len + 2 * pad < k + 1 {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - k - 1) / stride + 1;
                        let (lo, hi) = valid_range(k, pad, stride, in_len, out_len);
                        for o in 0..out_len {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < in_len;
                            assert_eq!(inside, o >= lo && o < hi, "k={k} pad={pad} s={stride} len={in_len} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f32> = (0..120).map(|v| v as f32).collect();
        let y = permute(&x, &shape, &[0, 2, 3, 1]);
        let z = permute(&y, &[2, 4, 5, 3], &[0, 3, 1, 2]);
        assert_eq!(x, z);
        // element (n=1, c=2, h=3, w=4) lands at (1, 3, 4, 2)
        assert_eq!(y[((4 + 3) * 5 + 4) * 3 + 2], x[((3 + 2) * 4 + 3) * 5 + 4]);
    }
}
