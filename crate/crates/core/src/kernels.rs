//! Slice-level forward/backward kernels behind the graph ops.
//!
//! Accumulation order inside every kernel is fixed (channel, kernel row,
//! kernel column, then spatial), so identical inputs give bit-identical
//! outputs, and circularly shifted inputs give circularly shifted outputs
//! bit-for-bit.

use serde::{Deserialize, Serialize};

/// Border handling for convolutions and translations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zeros,
    Circular,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    pub mode: PadMode,
}

/// A run of output positions `o0 + t` reading input positions `i0 + t * stride`.
#[derive(Clone, Copy, Debug)]
struct Run {
    o0: usize,
    i0: usize,
    len: usize,
}

fn source_index(o: usize, tap: usize, stride: usize, pad: usize, extent: usize, mode: PadMode) -> Option<usize> {
    let pos = (o * stride + tap) as isize - pad as isize;
    match mode {
        PadMode::Zeros => (pos >= 0 && (pos as usize) < extent).then_some(pos as usize),
        PadMode::Circular => Some(pos.rem_euclid(extent as isize) as usize),
    }
}

fn build_runs(out_len: usize, tap: usize, stride: usize, pad: usize, extent: usize, mode: PadMode) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for o in 0..out_len {
        let Some(i) = source_index(o, tap, stride, pad, extent, mode) else {
            continue;
        };
        match runs.last_mut() {
            Some(r) if r.o0 + r.len == o && r.i0 + r.len * stride == i => r.len += 1,
            _ => runs.push(Run { o0: o, i0: i, len: 1 }),
        }
    }
    runs
}

struct ConvPlan {
    rows: Vec<Vec<Option<usize>>>,
    cols: Vec<Vec<Run>>,
}

impl ConvPlan {
    fn new(g: &ConvGeom) -> Self {
        let rows = (0..g.kh)
            .map(|ky| (0..g.ho).map(|oy| source_index(oy, ky, g.stride, g.pad, g.h, g.mode)).collect())
            .collect();
        let cols = (0..g.kw).map(|kx| build_runs(g.wo, kx, g.stride, g.pad, g.w, g.mode)).collect();
        Self { rows, cols }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plan = ConvPlan::new(g);
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![0.0; g.b * g.k * ohw];
    for b in 0..g.b {
        for k in 0..g.k {
            let oplane = &mut out[(b * g.k + k) * ohw..(b * g.k + k + 1) * ohw];
            if let Some(bias) = bias {
                oplane.fill(bias[k]);
            }
            for c in 0..g.c {
                let xplane = &x[(b * g.c + c) * hw..(b * g.c + c + 1) * hw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                        for (oy, iy) in plan.rows[ky].iter().enumerate() {
                            let Some(iy) = *iy else { continue };
                            let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut oplane[oy * g.wo..(oy + 1) * g.wo];
                            for run in &plan.cols[kx] {
                                if g.stride == 1 {
                                    let dst = &mut orow[run.o0..run.o0 + run.len];
                                    let src = &xrow[run.i0..run.i0 + run.len];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for t in 0..run.len {
                                        orow[run.o0 + t] += wv * xrow[run.i0 + t * g.stride];
                                    }
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

/// Gradients of a convolution. Each requested gradient is accumulated into
/// the provided buffer.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plan = ConvPlan::new(g);
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    if let Some(db) = db {
        for b in 0..g.b {
            for k in 0..g.k {
                let plane = &dout[(b * g.k + k) * ohw..(b * g.k + k + 1) * ohw];
                db[k] += plane.iter().sum::<f64>();
            }
        }
    }
    for b in 0..g.b {
        for k in 0..g.k {
            let oplane = &dout[(b * g.k + k) * ohw..(b * g.k + k + 1) * ohw];
            for c in 0..g.c {
                let base = (b * g.c + c) * hw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let mut wacc = 0.0;
                        for (oy, iy) in plan.rows[ky].iter().enumerate() {
                            let Some(iy) = *iy else { continue };
                            let orow = &oplane[oy * g.wo..(oy + 1) * g.wo];
                            let row0 = base + iy * g.w;
                            for run in &plan.cols[kx] {
                                if let Some(dx) = dx.as_deref_mut() {
                                    for t in 0..run.len {
                                        dx[row0 + run.i0 + t * g.stride] += wv * orow[run.o0 + t];
                                    }
                                }
                                if dw.is_some() {
                                    for t in 0..run.len {
                                        wacc += orow[run.o0 + t] * x[row0 + run.i0 + t * g.stride];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl PoolGeom {
    pub fn out_dims(&self) -> (usize, usize) {
        (self.h / self.k, self.w / self.k)
    }
}

pub(crate) fn avgpool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (ho, wo) = g.out_dims();
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.planes * ho * wo];
    for p in 0..g.planes {
        let xp = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..g.k {
                    for dx in 0..g.k {
                        s += xp[(oy * g.k + dy) * g.w + ox * g.k + dx];
                    }
                }
                out[(p * ho + oy) * wo + ox] = s * inv;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(dout: &[f64], g: &PoolGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_dims();
    let inv = 1.0 / (g.k * g.k) as f64;
    for p in 0..g.planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let gval = dout[(p * ho + oy) * wo + ox] * inv;
                for dy in 0..g.k {
                    for ddx in 0..g.k {
                        dx[p * g.h * g.w + (oy * g.k + dy) * g.w + ox * g.k + ddx] += gval;
                    }
                }
            }
        }
    }
}

/// Max pooling; returns the output and the flat input index of each window's
/// maximum (first maximum on ties).
pub(crate) fn maxpool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = g.out_dims();
    let mut out = vec![0.0; g.planes * ho * wo];
    let mut arg = vec![0usize; g.planes * ho * wo];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * g.k * g.w + ox * g.k;
                for dy in 0..g.k {
                    for dx in 0..g.k {
                        let idx = base + (oy * g.k + dy) * g.w + ox * g.k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// A sparse linear map between image planes: every output pixel is a
/// weighted sum of input pixels. Translations, rotations and upsampling are
/// all expressed this way, so one differentiable op covers them.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneMap {
    pub(crate) in_h: usize,
    pub(crate) in_w: usize,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<f64>,
}

impl PlaneMap {
    /// Builds a map from a per-output-pixel list of `(input index, weight)`.
    pub fn from_fn(
        (in_h, in_w): (usize, usize),
        (out_h, out_w): (usize, usize),
        mut taps: impl FnMut(usize, usize, &mut Vec<(usize, f64)>),
    ) -> Self {
        let mut offsets = Vec::with_capacity(out_h * out_w + 1);
        let mut src = Vec::new();
        let mut weight = Vec::new();
        let mut scratch = Vec::new();
        offsets.push(0);
        for y in 0..out_h {
            for x in 0..out_w {
                scratch.clear();
                taps(y, x, &mut scratch);
                for &(i, w) in &scratch {
                    debug_assert!(i < in_h * in_w);
                    src.push(i);
                    weight.push(w);
                }
                offsets.push(src.len());
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            offsets,
            src,
            weight,
        }
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self::from_fn((h, w), (h, w), |y, x, t| t.push((y * w + x, 1.0)))
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub(crate) fn forward(&self, x: &[f64], planes: usize) -> Vec<f64> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![0.0; planes * op];
        for p in 0..planes {
            let xp = &x[p * ip..(p + 1) * ip];
            let outp = &mut out[p * op..(p + 1) * op];
            for (o, slot) in outp.iter_mut().enumerate() {
                let (a, b) = (self.offsets[o], self.offsets[o + 1]);
                if b == a + 1 {
                    *slot = self.weight[a] * xp[self.src[a]];
                } else {
                    let mut s = 0.0;
                    for e in a..b {
                        s += self.weight[e] * xp[self.src[e]];
                    }
                    *slot = s;
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, dout: &[f64], planes: usize, dx: &mut [f64]) {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        for p in 0..planes {
            let gp = &dout[p * op..(p + 1) * op];
            let dxp = &mut dx[p * ip..(p + 1) * ip];
            for (o, &gv) in gp.iter().enumerate() {
                for e in self.offsets[o]..self.offsets[o + 1] {
                    dxp[self.src[e]] += self.weight[e] * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, mode: PadMode) -> ConvGeom {
        ConvGeom {
            b: 1,
            c: 1,
            h,
            w,
            k: 1,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            mode,
        }
    }

    /// Direct definition of cross-correlation, one output at a time.
    fn naive(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.ho * g.wo];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut s = 0.0;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let v = match g.mode {
                            PadMode::Zeros => {
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    0.0
                                } else {
                                    x[iy as usize * g.w + ix as usize]
                                }
                            }
                            PadMode::Circular => {
                                x[iy.rem_euclid(g.h as isize) as usize * g.w + ix.rem_euclid(g.w as isize) as usize]
                            }
                        };
                        s += wt[ky * g.kw + kx] * v;
                    }
                }
                out[oy * g.wo + ox] = s;
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let x: Vec<f64> = (0..42).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let wt: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.5).collect();
        for mode in [PadMode::Zeros, PadMode::Circular] {
            for stride in 1..=3 {
                for pad in 0..=2 {
                    let g = geom(6, 7, 3, 3, stride, pad, mode);
                    let fast = conv2d_forward(&x, &wt, None, &g);
                    let slow = naive(&x, &wt, &g);
                    for (a, b) in fast.iter().zip(&slow) {
                        assert!((a - b).abs() < 1e-12, "{mode:?} s{stride} p{pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_routes_first_max() {
        let x = [1.0, 3.0, 3.0, 0.0];
        let (out, arg) = maxpool_forward(&x, &PoolGeom { planes: 1, h: 2, w: 2, k: 2 });
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn plane_map_transpose_is_adjoint() {
        let map = PlaneMap::from_fn((3, 3), (2, 4), |y, x, t| {
            t.push(((y + x) % 9, 0.5));
            t.push(((y * 3 + x) % 9, -1.25));
        });
        let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
        let gy: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let y = map.forward(&x, 1);
        let mut gx = vec![0.0; 9];
        map.backward(&gy, 1, &mut gx);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
