//! Shared numeric kernels: 2-D convolution (forward and both backward
//! passes), stabilized softmax, top-k selection and Shannon entropy. The tape
//! ops and the value-level gating/analysis paths all call through here, so
//! the two routes are bit-identical by construction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps `ceil(extent / stride)`; pad = (kernel − 1) / 2 per side.
    Same,
    /// No padding; output shrinks by the kernel extent.
    Valid,
}

/// Resolved convolution geometry. All loop bounds derive from this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        let [c_in, h, w] = *input_shape else {
            return Err(Error::shape("conv2d", format!("input must be C×H×W, got {input_shape:?}")));
        };
        let [c_out, kc, kh, kw] = *kernel_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be Cout×Cin×kh×kw, got {kernel_shape:?}"),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel extents must be odd, got {kh}×{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad_h,
                w + 2 * pad_w
            )));
        }
        let out_h = (h + 2 * pad_h - kh) / stride + 1;
        let out_w = (w + 2 * pad_w - kw) / stride + 1;
        Ok(ConvGeom { c_in, h, w, c_out, kh, kw, stride, pad_h, pad_w, out_h, out_w })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.out_h, self.out_w]
    }
}

/// Output index range [lo, hi) such that `out·stride + off` lands in
/// `[0, in_extent)`.
fn out_range(in_extent: usize, out_extent: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let last = in_extent as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

/// Cross-correlation forward. `out` must be zeroed `c_out·out_h·out_w`.
pub fn conv2d_forward(input: &[f64], kernels: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let s = g.stride;
    for co in 0..g.c_out {
        let out_ch = &mut out[co * g.out_h * g.out_w..][..g.out_h * g.out_w];
        for ci in 0..g.c_in {
            let in_ch = &input[ci * g.h * g.w..][..g.h * g.w];
            let kbase = (co * g.c_in + ci) * g.kh * g.kw;
            for r in 0..g.kh {
                let off_h = r as isize - g.pad_h as isize;
                let (oh_lo, oh_hi) = out_range(g.h, g.out_h, s, off_h);
                for c in 0..g.kw {
                    let wgt = kernels[kbase + r * g.kw + c];
                    let off_w = c as isize - g.pad_w as isize;
                    let (ow_lo, ow_hi) = out_range(g.w, g.out_w, s, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * s) as isize + off_h;
                        let in_row = &in_ch[ih as usize * g.w..][..g.w];
                        let out_row = &mut out_ch[oh * g.out_w..][..g.out_w];
                        if s == 1 {
                            let start = (ow_lo as isize + off_w) as usize;
                            let n = ow_hi - ow_lo;
                            for (o, i) in
                                out_row[ow_lo..ow_hi].iter_mut().zip(&in_row[start..start + n])
                            {
                                *o += wgt * i;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                out_row[ow] += wgt * in_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate d(loss)/d(input) given d(loss)/d(out).
pub fn conv2d_backward_input(dout: &[f64], kernels: &[f64], g: &ConvGeom, dinput: &mut [f64]) {
    let s = g.stride;
    for co in 0..g.c_out {
        let dout_ch = &dout[co * g.out_h * g.out_w..][..g.out_h * g.out_w];
        for ci in 0..g.c_in {
            let din_ch = &mut dinput[ci * g.h * g.w..][..g.h * g.w];
            let kbase = (co * g.c_in + ci) * g.kh * g.kw;
            for r in 0..g.kh {
                let off_h = r as isize - g.pad_h as isize;
                let (oh_lo, oh_hi) = out_range(g.h, g.out_h, s, off_h);
                for c in 0..g.kw {
                    let wgt = kernels[kbase + r * g.kw + c];
                    let off_w = c as isize - g.pad_w as isize;
                    let (ow_lo, ow_hi) = out_range(g.w, g.out_w, s, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * s) as isize + off_h;
                        let din_row = &mut din_ch[ih as usize * g.w..][..g.w];
                        let dout_row = &dout_ch[oh * g.out_w..][..g.out_w];
                        if s == 1 {
                            let start = (ow_lo as isize + off_w) as usize;
                            let n = ow_hi - ow_lo;
                            for (i, o) in
                                din_row[start..start + n].iter_mut().zip(&dout_row[ow_lo..ow_hi])
                            {
                                *i += wgt * o;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                din_row[iw] += wgt * dout_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate d(loss)/d(kernels) given d(loss)/d(out).
pub fn conv2d_backward_kernels(dout: &[f64], input: &[f64], g: &ConvGeom, dkern: &mut [f64]) {
    let s = g.stride;
    for co in 0..g.c_out {
        let dout_ch = &dout[co * g.out_h * g.out_w..][..g.out_h * g.out_w];
        for ci in 0..g.c_in {
            let in_ch = &input[ci * g.h * g.w..][..g.h * g.w];
            let kbase = (co * g.c_in + ci) * g.kh * g.kw;
            for r in 0..g.kh {
                let off_h = r as isize - g.pad_h as isize;
                let (oh_lo, oh_hi) = out_range(g.h, g.out_h, s, off_h);
                for c in 0..g.kw {
                    let off_w = c as isize - g.pad_w as isize;
                    let (ow_lo, ow_hi) = out_range(g.w, g.out_w, s, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * s) as isize + off_h;
                        let in_row = &in_ch[ih as usize * g.w..][..g.w];
                        let dout_row = &dout_ch[oh * g.out_w..][..g.out_w];
                        if s == 1 {
                            let start = (ow_lo as isize + off_w) as usize;
                            let n = ow_hi - ow_lo;
                            for (o, i) in dout_row[ow_lo..ow_hi].iter().zip(&in_row[start..start + n])
                            {
                                acc += o * i;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                acc += dout_row[ow] * in_row[iw];
                            }
                        }
                    }
                    dkern[kbase + r * g.kw + c] += acc;
                }
            }
        }
    }
}

/// Max-stabilized softmax over `z[idx]` for the given index subset.
/// The full softmax is this kernel applied to all indices, so subset and
/// full paths agree bit-for-bit on identical index sets.
pub fn softmax_over(z: &[f64], idx: &[usize]) -> Vec<f64> {
    debug_assert!(!idx.is_empty());
    let max = idx.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = idx.iter().map(|&i| (z[i] - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// The stabilizing shift and exp-sum `softmax_over` uses internally,
/// computed with the identical operation order so callers can capture them
/// and later reproduce the base evaluation bit for bit.
pub fn softmax_over_normalizer(z: &[f64], idx: &[usize]) -> (f64, f64) {
    debug_assert!(!idx.is_empty());
    let max = idx.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = idx.iter().map(|&i| (z[i] - max).exp()).sum();
    (max, sum)
}

/// Full stabilized softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let all: Vec<usize> = (0..z.len()).collect();
    softmax_over(z, &all)
}

/// Indices of the `k` largest values, descending, ties broken toward the
/// lowest index.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Shannon entropy in bits; 0·log(0) taken as 0.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    h
}
