//! Brute-force sum-of-squared-differences block matching, used as an
//! independent disparity oracle.

use resonance::Tensor;

/// Winner-take-all disparity per left pixel of single-plane `[1, 1, H, W]`
/// images: the candidate in `0..=d_max` minimizing the SSD over a
/// `(2 radius + 1)^2` window, with zeros outside the image and the lowest
/// disparity winning ties.
pub fn block_match(left: &Tensor, right: &Tensor, d_max: usize, radius: usize) -> Vec<usize> {
    let (h, w) = (left.shape()[2] as isize, left.shape()[3] as isize);
    let (l, r) = (left.data(), right.data());
    let px = |v: &[f64], y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            v[(y * w + x) as usize]
        }
    };
    let rad = radius as isize;
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut best = (f64::INFINITY, 0);
            for d in 0..=d_max as isize {
                let mut c = 0.0;
                for dy in -rad..=rad {
                    for dx in -rad..=rad {
                        let t = px(l, y + dy, x + dx) - px(r, y + dy, x + dx - d);
                        c += t * t;
                    }
                }
                if c < best.0 {
                    best = (c, d as usize);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Mean absolute difference between `pred` and the oracle over pixels where
/// `mask` is nonzero.
pub fn mae_against_oracle(pred: &Tensor, oracle: &[usize], mask: &Tensor) -> f64 {
    let (mut e, mut n) = (0.0, 0.0);
    for ((&p, &o), &m) in pred.data().iter().zip(oracle).zip(mask.data()) {
        if m != 0.0 {
            e += (p - o as f64).abs();
            n += 1.0;
        }
    }
    e / n
}
