//! Forward/backward kernels for the tape primitives.
//!
//! All loops run in a fixed sequential order so results are run-to-run
//! deterministic. Kernels operate on flat slices plus explicit dims; shape
//! validation happens in the tape layer before a kernel is called.

use super::Element;
use crate::error::{Error, Result};

/// Static parameters of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Output extent of a conv/pool along one axis, or an error when the kernel
/// does not fit.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    axis: &str,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArg("stride must be positive".into()));
    }
    if dilation == 0 {
        return Err(Error::InvalidArg("dilation must be positive".into()));
    }
    if kernel == 0 {
        return Err(Error::InvalidArg("kernel extent must be positive".into()));
    }
    let effective = dilation * (kernel - 1) + 1;
    if input + 2 * padding < effective {
        return Err(Error::ShapeMismatch(format!(
            "{axis}: input extent {input} with padding {padding} is smaller than \
             effective kernel extent {effective}"
        )));
    }
    Ok((input + 2 * padding - effective) / stride + 1)
}

/// Range of output positions whose tap `k` lands inside `[0, input)`.
/// Returns `(o_lo, o_hi_exclusive, first_input_index)`.
fn valid_out_range(
    out_extent: usize,
    input: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    k: usize,
) -> (usize, usize, usize) {
    // input index = o * stride + k * dilation - padding
    let off = k as isize * dilation as isize - padding as isize;
    let lo = if off >= 0 {
        0
    } else {
        // smallest o with o*stride + off >= 0
        ((-off) as usize).div_ceil(stride)
    };
    // largest o with o*stride + off <= input-1
    let max_in = input as isize - 1 - off;
    if max_in < 0 {
        return (0, 0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_extent);
    if lo >= hi {
        return (0, 0, 0);
    }
    let first = (lo as isize * stride as isize + off) as usize;
    (lo, hi, first)
}

pub fn conv2d_forward<T: Element>(
    x: &[T],
    xdim: [usize; 4],
    w: &[T],
    wdim: [usize; 4],
    spec: Conv2dSpec,
    out: &mut [T],
    odim: [usize; 4],
) {
    let [n, _ic, h, wi] = xdim;
    let [oc, icg, kh, kw] = wdim;
    let [_, _, oh, ow] = odim;
    let s = spec.stride;
    let p = spec.padding;
    let d = spec.dilation;
    let ocg = oc / spec.groups;
    let in_plane = h * wi;
    let out_plane = oh * ow;
    let ic_total = icg * spec.groups;

    for ni in 0..n {
        let x_n = &x[ni * ic_total * in_plane..(ni + 1) * ic_total * in_plane];
        let out_n = &mut out[ni * oc * out_plane..(ni + 1) * oc * out_plane];
        for oci in 0..oc {
            let g = oci / ocg;
            let out_c = &mut out_n[oci * out_plane..(oci + 1) * out_plane];
            for icg_i in 0..icg {
                let ici = g * icg + icg_i;
                let x_c = &x_n[ici * in_plane..(ici + 1) * in_plane];
                let w_base = ((oci * icg + icg_i) * kh) * kw;
                for khi in 0..kh {
                    let (oh_lo, oh_hi, ih_first) = valid_out_range(oh, h, s, p, d, khi);
                    for kwi in 0..kw {
                        let wv = w[w_base + khi * kw + kwi];
                        if wv == T::ZERO {
                            continue;
                        }
                        let (ow_lo, ow_hi, iw_first) = valid_out_range(ow, wi, s, p, d, kwi);
                        let mut ih = ih_first;
                        for ohi in oh_lo..oh_hi {
                            let x_row = &x_c[ih * wi..ih * wi + wi];
                            let o_row = &mut out_c[ohi * ow..ohi * ow + ow];
                            let mut iw = iw_first;
                            for ov in o_row[ow_lo..ow_hi].iter_mut() {
                                *ov += wv * x_row[iw];
                                iw += s;
                            }
                            ih += s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    xdim: [usize; 4],
    w: &[T],
    wdim: [usize; 4],
    spec: Conv2dSpec,
    d_out: &[T],
    odim: [usize; 4],
    d_x: Option<&mut [T]>,
    d_w: Option<&mut [T]>,
) {
    let [n, _ic, h, wi] = xdim;
    let [oc, icg, kh, kw] = wdim;
    let [_, _, oh, ow] = odim;
    let s = spec.stride;
    let p = spec.padding;
    let d = spec.dilation;
    let ocg = oc / spec.groups;
    let in_plane = h * wi;
    let out_plane = oh * ow;
    let ic_total = icg * spec.groups;

    if let Some(d_x) = d_x {
        for ni in 0..n {
            let do_n = &d_out[ni * oc * out_plane..(ni + 1) * oc * out_plane];
            let dx_n = &mut d_x[ni * ic_total * in_plane..(ni + 1) * ic_total * in_plane];
            for oci in 0..oc {
                let g = oci / ocg;
                let do_c = &do_n[oci * out_plane..(oci + 1) * out_plane];
                for icg_i in 0..icg {
                    let ici = g * icg + icg_i;
                    let dx_c = &mut dx_n[ici * in_plane..(ici + 1) * in_plane];
                    let w_base = ((oci * icg + icg_i) * kh) * kw;
                    for khi in 0..kh {
                        let (oh_lo, oh_hi, ih_first) = valid_out_range(oh, h, s, p, d, khi);
                        for kwi in 0..kw {
                            let wv = w[w_base + khi * kw + kwi];
                            if wv == T::ZERO {
                                continue;
                            }
                            let (ow_lo, ow_hi, iw_first) = valid_out_range(ow, wi, s, p, d, kwi);
                            let mut ih = ih_first;
                            for ohi in oh_lo..oh_hi {
                                let do_row = &do_c[ohi * ow..ohi * ow + ow];
                                let dx_row = &mut dx_c[ih * wi..ih * wi + wi];
                                let mut iw = iw_first;
                                for &g_out in do_row[ow_lo..ow_hi].iter() {
                                    dx_row[iw] += wv * g_out;
                                    iw += s;
                                }
                                ih += s;
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(d_w) = d_w {
        for ni in 0..n {
            let x_n = &x[ni * ic_total * in_plane..(ni + 1) * ic_total * in_plane];
            let do_n = &d_out[ni * oc * out_plane..(ni + 1) * oc * out_plane];
            for oci in 0..oc {
                let g = oci / ocg;
                let do_c = &do_n[oci * out_plane..(oci + 1) * out_plane];
                for icg_i in 0..icg {
                    let ici = g * icg + icg_i;
                    let x_c = &x_n[ici * in_plane..(ici + 1) * in_plane];
                    let w_base = ((oci * icg + icg_i) * kh) * kw;
                    for khi in 0..kh {
                        let (oh_lo, oh_hi, ih_first) = valid_out_range(oh, h, s, p, d, khi);
                        for kwi in 0..kw {
                            let (ow_lo, ow_hi, iw_first) = valid_out_range(ow, wi, s, p, d, kwi);
                            let mut acc = T::ZERO;
                            let mut ih = ih_first;
                            for ohi in oh_lo..oh_hi {
                                let x_row = &x_c[ih * wi..ih * wi + wi];
                                let do_row = &do_c[ohi * ow..ohi * ow + ow];
                                let mut iw = iw_first;
                                for &g_out in do_row[ow_lo..ow_hi].iter() {
                                    acc += g_out * x_row[iw];
                                    iw += s;
                                }
                                ih += s;
                            }
                            d_w[w_base + khi * kw + kwi] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling with window `k`. Padded cells are never selected (they act as
/// negative infinity). Ties go to the first in-window position in row-major
/// scan order. Returns argmax flat indices (into the input plane) per output
/// cell for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward<T: Element>(
    x: &[T],
    xdim: [usize; 4],
    k: usize,
    stride: usize,
    padding: usize,
    out: &mut [T],
    odim: [usize; 4],
    argmax: &mut [usize],
) {
    let [n, c, h, w] = xdim;
    let [_, _, oh, ow] = odim;
    let plane = h * w;
    let out_plane = oh * ow;
    for nc in 0..n * c {
        let x_p = &x[nc * plane..(nc + 1) * plane];
        let out_p = &mut out[nc * out_plane..(nc + 1) * out_plane];
        let am_p = &mut argmax[nc * out_plane..(nc + 1) * out_plane];
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for khi in 0..k {
                    let ih = ohi as isize * stride as isize + khi as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kwi in 0..k {
                        let iw = owi as isize * stride as isize + kwi as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ih as usize * w + iw as usize;
                        let v = x_p[idx];
                        match best {
                            Some((bv, _)) if v <= bv => {}
                            _ => best = Some((v, idx)),
                        }
                    }
                }
                let (v, idx) = best.expect("pool window entirely outside input");
                out_p[ohi * ow + owi] = v;
                am_p[ohi * ow + owi] = idx;
            }
        }
    }
}

/// Average pooling with a fixed divisor of `k*k`; padded cells contribute
/// zero to the sum but still count in the divisor.
#[allow(clippy::too_many_arguments)]
pub fn avg_pool_forward<T: Element>(
    x: &[T],
    xdim: [usize; 4],
    k: usize,
    stride: usize,
    padding: usize,
    out: &mut [T],
    odim: [usize; 4],
) {
    let [n, c, h, w] = xdim;
    let [_, _, oh, ow] = odim;
    let plane = h * w;
    let out_plane = oh * ow;
    let inv = T::ONE / T::from_f64((k * k) as f64);
    for nc in 0..n * c {
        let x_p = &x[nc * plane..(nc + 1) * plane];
        let out_p = &mut out[nc * out_plane..(nc + 1) * out_plane];
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut acc = T::ZERO;
                for khi in 0..k {
                    let ih = ohi as isize * stride as isize + khi as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kwi in 0..k {
                        let iw = owi as isize * stride as isize + kwi as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        acc += x_p[ih as usize * w + iw as usize];
                    }
                }
                out_p[ohi * ow + owi] = acc * inv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward<T: Element>(
    d_out: &[T],
    odim: [usize; 4],
    xdim: [usize; 4],
    k: usize,
    stride: usize,
    padding: usize,
    d_x: &mut [T],
) {
    let [n, c, h, w] = xdim;
    let [_, _, oh, ow] = odim;
    let plane = h * w;
    let out_plane = oh * ow;
    let inv = T::ONE / T::from_f64((k * k) as f64);
    for nc in 0..n * c {
        let do_p = &d_out[nc * out_plane..(nc + 1) * out_plane];
        let dx_p = &mut d_x[nc * plane..(nc + 1) * plane];
        for ohi in 0..oh {
            for owi in 0..ow {
                let g = do_p[ohi * ow + owi] * inv;
                for khi in 0..k {
                    let ih = ohi as isize * stride as isize + khi as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kwi in 0..k {
                        let iw = owi as isize * stride as isize + kwi as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx_p[ih as usize * w + iw as usize] += g;
                    }
                }
            }
        }
    }
}

/// Per-channel batch statistics over the (N, H, W) axes. Two-pass for
/// accuracy; returns (mean, inv_std) with `inv_std = 1/sqrt(var + eps)`.
pub fn batch_stats<T: Element>(x: &[T], xdim: [usize; 4], eps: T) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = xdim;
    let plane = h * w;
    let m = n * plane;
    let inv_m = T::ONE / T::from_f64(m as f64);
    let mut mean = vec![T::ZERO; c];
    let mut inv_std = vec![T::ZERO; c];
    for ci in 0..c {
        let mut acc = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &x[base..base + plane] {
                acc += v;
            }
        }
        let mu = acc * inv_m;
        let mut var = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &x[base..base + plane] {
                let d = v - mu;
                var += d * d;
            }
        }
        var = var * inv_m;
        mean[ci] = mu;
        inv_std[ci] = T::ONE / (var + eps).sqrt();
    }
    (mean, inv_std)
}

pub fn linear_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    d: usize,
    k: usize,
    out: &mut [T],
) {
    for ni in 0..n {
        let x_row = &x[ni * d..(ni + 1) * d];
        let o_row = &mut out[ni * k..(ni + 1) * k];
        if let Some(b) = b {
            o_row.copy_from_slice(b);
        }
        for (di, &xv) in x_row.iter().enumerate() {
            if xv == T::ZERO {
                continue;
            }
            let w_row = &w[di * k..(di + 1) * k];
            for (ov, &wv) in o_row.iter_mut().zip(w_row.iter()) {
                *ov += xv * wv;
            }
        }
    }
}

/// Row-wise softmax over the last axis, shift-stable.
pub fn softmax_rows<T: Element>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let o_row = &mut out[r * cols..(r + 1) * cols];
        let mut mx = x_row[0];
        for &v in &x_row[1..] {
            mx = mx.maximum(v);
        }
        let mut sum = T::ZERO;
        for (o, &v) in o_row.iter_mut().zip(x_row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for o in o_row.iter_mut() {
            *o *= inv;
        }
    }
}

/// Per-row log-sum-exp, used by the fused cross-entropy op.
pub fn log_sum_exp_rows<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut lse = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.maximum(v);
        }
        let mut sum = T::ZERO;
        for &v in row {
            sum += (v - mx).exp();
        }
        lse.push(mx + sum.ln());
    }
    lse
}
