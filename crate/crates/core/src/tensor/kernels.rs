//! Dense compute kernels shared by the tape ops.
//!
//! All sums accumulate in f64 with a fixed iteration order.

use crate::error::{Error, Result};

/// Stride, zero padding and channel grouping of a 3-D convolution.
///
/// Stride and padding apply uniformly to all three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv3dSpec {
    /// Stride 1 with "same" padding for a cubic kernel of side `k`.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(k)
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }
}

/// Dot product with eight independent f64 partial sums combined in a
/// fixed order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Sum with the same lane structure as [`dot`].
pub(crate) fn sum(a: &[f32]) -> f64 {
    let mut acc = [0f64; 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] += x[l] as f64;
        }
    }
    let tail: f64 = rest.iter().map(|&x| x as f64).sum();
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy(acc: &mut [f64], alpha: f64, x: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v as f64;
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(&mut acc, av as f64, &b[p * n..(p + 1) * n]);
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]) as f32;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0f64; m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(&mut acc[i * n..(i + 1) * n], a[p * m + i] as f64, br);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub idims: [usize; 3],
    pub kdims: [usize; 3],
    pub odims: [usize; 3],
    pub spec: Conv3dSpec,
}

impl ConvGeom {
    pub fn new(xshape: &[usize], wshape: &[usize], spec: Conv3dSpec) -> Result<Self> {
        let (cin, idims) = match xshape {
            [c, d, h, w] => (*c, [*d, *h, *w]),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv3d input must be [C, D, H, W], got {xshape:?}"
                )))
            }
        };
        let (cout, cin_g, kdims) = match wshape {
            [o, i, a, b, c] => (*o, *i, [*a, *b, *c]),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv3d weight must be [Cout, Cin/groups, kD, kH, kW], got {wshape:?}"
                )))
            }
        };
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "channels (in {cin}, out {cout}) not divisible by groups {}",
                spec.groups
            )));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::Dimension(format!(
                "weight expects {cin_g} input channels per group, input has {cin} over {} groups",
                spec.groups
            )));
        }
        if kdims.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel sizes must be odd, got {kdims:?}")));
        }
        if spec.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let mut odims = [0; 3];
        for ax in 0..3 {
            let padded = idims[ax] + 2 * spec.padding;
            if padded < kdims[ax] {
                return Err(Error::Dimension(format!(
                    "kernel {kdims:?} larger than padded input {idims:?}"
                )));
            }
            odims[ax] = (padded - kdims[ax]) / spec.stride + 1;
        }
        Ok(Self {
            cin,
            cout,
            cin_g,
            cout_g: cout / spec.groups,
            idims,
            kdims,
            odims,
            spec,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kdims == [1, 1, 1]
            && self.spec.stride == 1
            && self.spec.padding == 0
            && self.spec.groups == 1
    }

    fn in_spatial(&self) -> usize {
        self.idims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.odims.iter().product()
    }

    /// Output index range along one axis whose input index stays in bounds
    /// for kernel tap `tap`.
    fn valid_range(&self, ax: usize, tap: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let hi_in = self.idims[ax] + p; // exclusive bound on ow*s + tap
        let hi = if hi_in > tap {
            ((hi_in - tap - 1) / s + 1).min(self.odims[ax])
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every (output row, input row) pair for one kernel tap.
    /// The callback receives output and input flat offsets of the row start
    /// plus the valid output column range.
    fn for_each_row(&self, tap: [usize; 3], mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let [_, ih, iw] = self.idims;
        let [_, oh, ow] = self.odims;
        let (d0, d1) = self.valid_range(0, tap[0]);
        let (h0, h1) = self.valid_range(1, tap[1]);
        let (w0, w1) = self.valid_range(2, tap[2]);
        if w0 >= w1 {
            return;
        }
        for od in d0..d1 {
            let id = od * s + tap[0] - p;
            for oh_ in h0..h1 {
                let ih_ = oh_ * s + tap[1] - p;
                let orow = (od * oh + oh_) * ow;
                let irow = (id * ih + ih_) * iw;
                f(orow, irow, w0, w1);
            }
        }
    }

    fn weight_index(&self, o: usize, ic: usize, tap: [usize; 3]) -> usize {
        let [kd, kh, kw] = self.kdims;
        (((o * self.cin_g + ic) * kd + tap[0]) * kh + tap[1]) * kw + tap[2]
    }

    fn taps(&self) -> impl Iterator<Item = [usize; 3]> {
        let [kd, kh, kw] = self.kdims;
        (0..kd).flat_map(move |a| (0..kh).flat_map(move |b| (0..kw).map(move |c| [a, b, c])))
    }
}

pub(crate) fn conv3d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (si, so) = (g.in_spatial(), g.out_spatial());
    let mut out = if g.is_pointwise() {
        gemm_nn(w, x, g.cout, g.cin, si)
    } else {
        let mut out = vec![0f32; g.cout * so];
        let mut acc = vec![0f64; so];
        let s = g.spec.stride;
        let p = g.spec.padding;
        for o in 0..g.cout {
            acc.fill(0.0);
            let grp = o / g.cout_g;
            for ic in 0..g.cin_g {
                let xc = &x[(grp * g.cin_g + ic) * si..][..si];
                for tap in g.taps() {
                    let wv = w[g.weight_index(o, ic, tap)] as f64;
                    g.for_each_row(tap, |orow, irow, w0, w1| {
                        if s == 1 {
                            let i0 = irow + w0 + tap[2] - p;
                            axpy(&mut acc[orow + w0..orow + w1], wv, &xc[i0..i0 + (w1 - w0)]);
                        } else {
                            for owi in w0..w1 {
                                acc[orow + owi] += wv * xc[irow + owi * s + tap[2] - p] as f64;
                            }
                        }
                    });
                }
            }
            for (dst, &v) in out[o * so..(o + 1) * so].iter_mut().zip(&acc) {
                *dst = v as f32;
            }
        }
        out
    };
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * so..(o + 1) * so].iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv3d_grad_input(gout: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (si, so) = (g.in_spatial(), g.out_spatial());
    if g.is_pointwise() {
        return gemm_tn(w, gout, g.cin, g.cout, si);
    }
    let mut acc = vec![0f64; g.cin * si];
    let s = g.spec.stride;
    let p = g.spec.padding;
    for o in 0..g.cout {
        let go = &gout[o * so..(o + 1) * so];
        let grp = o / g.cout_g;
        for ic in 0..g.cin_g {
            let ci = grp * g.cin_g + ic;
            let gx = &mut acc[ci * si..(ci + 1) * si];
            for tap in g.taps() {
                let wv = w[g.weight_index(o, ic, tap)] as f64;
                g.for_each_row(tap, |orow, irow, w0, w1| {
                    if s == 1 {
                        let i0 = irow + w0 + tap[2] - p;
                        axpy(&mut gx[i0..i0 + (w1 - w0)], wv, &go[orow + w0..orow + w1]);
                    } else {
                        for owi in w0..w1 {
                            gx[irow + owi * s + tap[2] - p] += wv * go[orow + owi] as f64;
                        }
                    }
                });
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Gradient with respect to the convolution weight.
pub(crate) fn conv3d_grad_weight(gout: &[f32], x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (si, so) = (g.in_spatial(), g.out_spatial());
    if g.is_pointwise() {
        return gemm_nt(gout, x, g.cout, si, g.cin);
    }
    let ksz: usize = g.kdims.iter().product();
    let mut gw = vec![0f32; g.cout * g.cin_g * ksz];
    let s = g.spec.stride;
    let p = g.spec.padding;
    for o in 0..g.cout {
        let go = &gout[o * so..(o + 1) * so];
        let grp = o / g.cout_g;
        for ic in 0..g.cin_g {
            let xc = &x[(grp * g.cin_g + ic) * si..][..si];
            for tap in g.taps() {
                let mut total = 0f64;
                g.for_each_row(tap, |orow, irow, w0, w1| {
                    if s == 1 {
                        let i0 = irow + w0 + tap[2] - p;
                        total += dot(&go[orow + w0..orow + w1], &xc[i0..i0 + (w1 - w0)]);
                    } else {
                        for owi in w0..w1 {
                            total += go[orow + owi] as f64 * xc[irow + owi * s + tap[2] - p] as f64;
                        }
                    }
                });
                gw[g.weight_index(o, ic, tap)] = total as f32;
            }
        }
    }
    gw
}

pub(crate) fn conv3d_grad_bias(gout: &[f32], g: &ConvGeom) -> Vec<f32> {
    let so = g.out_spatial();
    (0..g.cout)
        .map(|o| sum(&gout[o * so..(o + 1) * so]) as f32)
        .collect()
}
