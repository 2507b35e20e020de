//! Purposeful perturbations: integer translations and small rotations of
//! images, and the matching inverse actions on feature maps computed on a
//! coarser lattice.
//!
//! Shifts are `(i, j)` = (rows, columns). Translating by `(i, j)` moves
//! content down by `i` and right by `j`: `out[y][x] = in[y - i][x - j]`.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{PadMode, PlaneMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shift {
    pub i: isize,
    pub j: isize,
}

impl Shift {
    pub const ZERO: Shift = Shift { i: 0, j: 0 };

    pub fn new(i: isize, j: isize) -> Self {
        Self { i, j }
    }

    pub fn neg(self) -> Self {
        Self { i: -self.i, j: -self.j }
    }
}

/// The grid `[-d_y, d_y] x [-d_x, d_x]` of translations with prior weights.
///
/// Shifts are enumerated row-major: `i` (rows) outer, `j` (columns) inner,
/// both ascending. Shift index `k` therefore always refers to the same
/// translation for a given `(d_x, d_y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSet {
    d_x: usize,
    d_y: usize,
    shifts: Vec<Shift>,
    weights: Vec<f64>,
}

impl ShiftSet {
    /// Full grid with uniform weights `1/N`.
    pub fn build(d_x: usize, d_y: usize) -> Self {
        let (dx, dy) = (d_x as isize, d_y as isize);
        let shifts: Vec<Shift> = (-dy..=dy)
            .flat_map(|i| (-dx..=dx).map(move |j| Shift { i, j }))
            .collect();
        let n = shifts.len();
        Self {
            d_x,
            d_y,
            shifts,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Square grid `d_x = d_y = d`.
    pub fn square(d: usize) -> Self {
        Self::build(d, d)
    }

    pub fn singleton() -> Self {
        Self::build(0, 0)
    }

    /// Replaces the prior weights; they must be non-negative and sum to 1.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.shifts.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} shifts",
                weights.len(),
                self.shifts.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("shift weights must be non-negative and sum to 1"));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn shifts(&self) -> &[Shift] {
        &self.shifts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }
}

/// How a pixel shift is converted to a shift on a feature lattice of stride `s`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// `round(i / s)`, halves away from zero.
    #[default]
    Nearest,
    /// `floor(i / s)`.
    Floor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// One purposeful perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupAction {
    Translate { shift: Shift, pad: PadMode },
    Rotate { degrees: f64 },
}

impl GroupAction {
    /// The map applied to input images of size `h x w`.
    pub fn image_map(&self, h: usize, w: usize) -> Result<PlaneMap> {
        match *self {
            GroupAction::Translate { shift, pad } => translation_map(h, w, shift, pad),
            GroupAction::Rotate { degrees } => Ok(rotation_map(h, w, degrees, Interpolation::Bilinear)),
        }
    }

    /// The inverse push-forward on a feature map of size `h x w` whose
    /// lattice has cumulative stride `stride` relative to the input.
    pub fn inverse_feature_map(&self, h: usize, w: usize, stride: usize, rounding: Rounding) -> Result<PlaneMap> {
        match *self {
            GroupAction::Translate { shift, pad } => {
                let fs = feature_shift(shift, stride, rounding)?;
                translation_map(h, w, saturate(fs.neg(), h, w), pad)
            }
            GroupAction::Rotate { degrees } => Ok(rotation_map(h, w, -degrees, Interpolation::Nearest)),
        }
    }
}

fn saturate(s: Shift, h: usize, w: usize) -> Shift {
    Shift {
        i: s.i.clamp(-(h as isize), h as isize),
        j: s.j.clamp(-(w as isize), w as isize),
    }
}

/// The feature-lattice equivalent of a pixel shift at stride `stride`.
pub fn feature_shift(shift: Shift, stride: usize, rounding: Rounding) -> Result<Shift> {
    if stride == 0 {
        return Err(Error::invalid("feature stride must be >= 1"));
    }
    let s = stride as isize;
    let conv = |v: isize| match rounding {
        Rounding::Nearest => (v as f64 / s as f64).round() as isize,
        Rounding::Floor => v.div_euclid(s),
    };
    Ok(Shift {
        i: conv(shift.i),
        j: conv(shift.j),
    })
}

/// Plane map translating `h x w` planes by `shift`.
pub fn translation_map(h: usize, w: usize, shift: Shift, pad: PadMode) -> Result<PlaneMap> {
    if shift.i.unsigned_abs() > h || shift.j.unsigned_abs() > w {
        return Err(Error::invalid(format!(
            "shift ({}, {}) exceeds image size {h}x{w}",
            shift.i, shift.j
        )));
    }
    let (hi, wi) = (h as isize, w as isize);
    Ok(PlaneMap::from_fn((h, w), (h, w), |y, x, taps| {
        let sy = y as isize - shift.i;
        let sx = x as isize - shift.j;
        match pad {
            PadMode::Zeros => {
                if (0..hi).contains(&sy) && (0..wi).contains(&sx) {
                    taps.push((sy as usize * w + sx as usize, 1.0));
                }
            }
            PadMode::Circular => {
                taps.push((sy.rem_euclid(hi) as usize * w + sx.rem_euclid(wi) as usize, 1.0));
            }
        }
    }))
}

/// Rotation about the plane center by `degrees`. Out-of-range samples read zero.
pub fn rotation_map(h: usize, w: usize, degrees: f64, interp: Interpolation) -> PlaneMap {
    if degrees == 0.0 {
        return PlaneMap::identity(h, w);
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    PlaneMap::from_fn((h, w), (h, w), |y, x, taps| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = cy - dx * sin + dy * cos;
        let sx = cx + dx * cos + dy * sin;
        match interp {
            Interpolation::Nearest => {
                let (ry, rx) = (sy.round() as isize, sx.round() as isize);
                if inside(ry, rx) {
                    taps.push((ry as usize * w + rx as usize, 1.0));
                }
            }
            Interpolation::Bilinear => {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let (yy, xx) = (y0 + oy, x0 + ox);
                        let wt = wy * wx;
                        if wt != 0.0 && inside(yy, xx) {
                            taps.push((yy as usize * w + xx as usize, wt));
                        }
                    }
                }
            }
        }
    })
}

fn apply_map(x: &Tensor, map: &PlaneMap, op: &'static str) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4(op)?;
    if map.input_dims() != (h, w) {
        return Err(Error::shape(op, format!("plane map built for {:?}, input is {h}x{w}", map.input_dims())));
    }
    let (oh, ow) = map.output_dims();
    Ok(Tensor::from_parts(vec![b, c, oh, ow], map.forward(x.data(), b * c)))
}

/// Applies any plane map to a `[B, C, H, W]` tensor.
pub fn resample(x: &Tensor, map: &PlaneMap) -> Result<Tensor> {
    apply_map(x, map, "resample")
}

/// Translates every plane of `x` by `shift`, filling vacated cells per `pad`.
pub fn translate_image(x: &Tensor, shift: Shift, pad: PadMode) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4("translate_image")?;
    apply_map(x, &translation_map(h, w, shift, pad)?, "translate_image")
}

/// Undoes an input shift on a feature map of cumulative stride `stride`:
/// the map is moved by `-round(i/s), -round(j/s)` cells (or floor), with
/// shifts saturating at the map size.
pub fn inverse_shift_features(
    features: &Tensor,
    shift: Shift,
    stride: usize,
    rounding: Rounding,
    pad: PadMode,
) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4("inverse_shift_features")?;
    let map = GroupAction::Translate { shift, pad }.inverse_feature_map(h, w, stride, rounding)?;
    apply_map(features, &map, "inverse_shift_features")
}

/// Rotates every plane about its center.
pub fn rotate_image(x: &Tensor, degrees: f64, interp: Interpolation) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4("rotate_image")?;
    apply_map(x, &rotation_map(h, w, degrees, interp), "rotate_image")
}

/// Rotates feature planes by `-degrees` with nearest-cell sampling.
pub fn inverse_rotate_features(features: &Tensor, degrees: f64) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4("inverse_rotate_features")?;
    apply_map(features, &rotation_map(h, w, -degrees, Interpolation::Nearest), "inverse_rotate_features")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, 1, h, w], data).unwrap()
    }

    #[test]
    fn shift_set_sizes_and_order() {
        let s = ShiftSet::build(0, 0);
        assert_eq!(s.shifts(), &[Shift::ZERO]);
        assert_eq!(s.weights(), &[1.0]);

        assert_eq!(ShiftSet::square(1).len(), 9);

        let s = ShiftSet::square(3);
        assert_eq!(s.len(), 49);
        assert!(s.weights().iter().all(|&w| w == 1.0 / 49.0));
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);

        let s = ShiftSet::build(2, 1);
        assert_eq!(s.len(), 15);
        assert_eq!(s.shifts()[0], Shift::new(-1, -2));
        assert_eq!(s.shifts()[1], Shift::new(-1, -1));
        assert_eq!(s.shifts()[14], Shift::new(1, 2));
        assert!(s.shifts().contains(&Shift::ZERO));
        let mut dedup = s.shifts().to_vec();
        dedup.sort_by_key(|s| (s.i, s.j));
        dedup.dedup();
        assert_eq!(dedup.len(), 15);
    }

    #[test]
    fn translate_hand_example() {
        let x = t4(2, 2, vec![1., 2., 3., 4.]);
        let y = translate_image(&x, Shift::new(0, 1), PadMode::Zeros).unwrap();
        assert_eq!(y.data(), &[0., 1., 0., 3.]);
        assert_eq!(translate_image(&x, Shift::ZERO, PadMode::Zeros).unwrap(), x);
    }

    #[test]
    fn circular_translate_inverts() {
        let x = Tensor::from_fn(vec![1, 2, 5, 6], |i| (i as f64 * 0.37).sin());
        let y = translate_image(&x, Shift::new(1, 2), PadMode::Circular).unwrap();
        let z = translate_image(&y, Shift::new(-1, -2), PadMode::Circular).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn oversized_shift_is_rejected() {
        let x = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(translate_image(&x, Shift::new(4, 0), PadMode::Zeros).is_err());
        assert!(translate_image(&x, Shift::new(0, -3), PadMode::Zeros).is_ok());
    }

    #[test]
    fn feature_shift_rounding() {
        let f = |i, s, r| feature_shift(Shift::new(i, 0), s, r).unwrap().i;
        assert_eq!(f(1, 4, Rounding::Nearest), 0);
        assert_eq!(f(3, 2, Rounding::Nearest), 2);
        assert_eq!(f(-3, 2, Rounding::Nearest), -2);
        assert_eq!(f(-1, 4, Rounding::Floor), -1);
        assert_eq!(f(5, 1, Rounding::Floor), 5);
    }

    #[test]
    fn sub_stride_shift_leaves_features_untouched() {
        let f = Tensor::from_fn(vec![1, 3, 4, 4], |i| i as f64);
        let g = inverse_shift_features(&f, Shift::new(1, 0), 4, Rounding::Nearest, PadMode::Zeros).unwrap();
        assert_eq!(g, f);
        for s in 1..5 {
            let g = inverse_shift_features(&f, Shift::ZERO, s, Rounding::Nearest, PadMode::Zeros).unwrap();
            assert_eq!(g, f);
        }
    }

    #[test]
    fn stride_two_realignment_of_impulse() {
        // A delta at row 8 moved by 3 rows, then encoded at stride 2 by
        // plain subsampling, then realigned: the surviving impulse lands
        // within one input pixel of where it started.
        let mut img = vec![0.0; 16 * 16];
        img[8 * 16 + 8] = 1.0;
        let x = t4(16, 16, img);
        let shifted = translate_image(&x, Shift::new(3, 0), PadMode::Zeros).unwrap();
        let sub = |t: &Tensor| {
            Tensor::from_fn(vec![1, 1, 8, 8], |k| {
                let (r, c) = (k / 8, k % 8);
                t.data()[(2 * r) * 16 + 2 * c] + t.data()[(2 * r + 1) * 16 + 2 * c]
            })
        };
        let feat = sub(&shifted);
        let realigned = inverse_shift_features(&feat, Shift::new(3, 0), 2, Rounding::Nearest, PadMode::Zeros).unwrap();
        let row = realigned.data().iter().position(|&v| v > 0.0).unwrap() / 8;
        // Feature row r covers input rows 2r and 2r+1.
        let err = [(2 * row) as isize - 8, (2 * row + 1) as isize - 8]
            .iter()
            .map(|d| d.abs())
            .min()
            .unwrap();
        assert!(err <= 1, "alignment error {err}");
    }

    #[test]
    fn rotation_zero_and_quarter_turn() {
        let x = Tensor::from_fn(vec![1, 1, 5, 5], |i| i as f64);
        assert_eq!(rotate_image(&x, 0.0, Interpolation::Bilinear).unwrap(), x);
        let r = rotate_image(&x, 90.0, Interpolation::Nearest).unwrap();
        assert_ne!(r, x);
        let back = rotate_image(&r, -90.0, Interpolation::Nearest).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn bilinear_rotation_round_trip_on_blob() {
        let n = 24;
        let c = (n as f64 - 1.0) / 2.0;
        let x = Tensor::from_fn(vec![1, 1, n, n], |k| {
            let (y, xx) = ((k / n) as f64, (k % n) as f64);
            (-((y - c).powi(2) + (xx - c).powi(2)) / (2.0 * 4.0f64.powi(2))).exp()
        });
        for angle in [3.0, 7.5, 12.0, 15.0] {
            let r = rotate_image(&x, angle, Interpolation::Bilinear).unwrap();
            let back = rotate_image(&r, -angle, Interpolation::Bilinear).unwrap();
            let mut worst: f64 = 0.0;
            for y in 2..n - 2 {
                for xx in 2..n - 2 {
                    worst = worst.max((back.get(&[0, 0, y, xx]) - x.get(&[0, 0, y, xx])).abs());
                }
            }
            assert!(worst <= 0.15, "angle {angle}: {worst}");
        }
    }
}
