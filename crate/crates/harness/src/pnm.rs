//! Portable graymap/pixmap output and the plain-text disparity sidecar.
//!
//! Sidecar format: a header line `# disparity <height> <width>`, then one
//! line per image row with `width` space-separated values; invalid pixels
//! are written as `nan`.

use std::fmt::Write as _;
use std::path::Path;

use resonance::archive::write_atomic;
use resonance::Tensor;

use crate::error::{Error, Result};

fn plane(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w, t.data())),
        _ => Err(Error::Config(format!("expected a single plane, got {:?}", t.shape()))),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (`P5`) bytes of a plane with values in `[lo, hi]`.
pub fn pgm_bytes(t: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let (h, w, data) = plane(t)?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| to_byte((v - lo) / span)));
    Ok(out)
}

/// Binary PPM (`P6`) red/cyan anaglyph: left image in red, right in green
/// and blue.
pub fn anaglyph_bytes(left: &Tensor, right: &Tensor) -> Result<Vec<u8>> {
    let (h, w, l) = plane(left)?;
    let (h2, w2, r) = plane(right)?;
    if (h, w) != (h2, w2) {
        return Err(Error::Config("anaglyph planes differ in size".into()));
    }
    let (lo, hi) = l
        .iter()
        .chain(r)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&a, &b) in l.iter().zip(r) {
        let (a, b) = (to_byte((a - lo) / span), to_byte((b - lo) / span));
        out.extend([a, b, b]);
    }
    Ok(out)
}

pub fn disparity_sidecar(values: &Tensor, valid: Option<&[bool]>) -> Result<String> {
    let (h, w, data) = plane(values)?;
    let mut s = format!("# disparity {h} {w}\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let i = y * w + x;
                if valid.is_some_and(|v| !v[i]) {
                    "nan".to_string()
                } else {
                    format!("{}", data[i])
                }
            })
            .collect();
        writeln!(s, "{}", row.join(" ")).expect("writing to a String");
    }
    Ok(s)
}

/// Parses a sidecar back into `[H, W]` values (`nan` for invalid pixels).
pub fn parse_disparity_sidecar(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let dims: Vec<usize> = header
        .strip_prefix("# disparity ")
        .ok_or_else(|| Error::Integrity("missing disparity header".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Integrity(format!("bad dimension `{t}`"))))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else {
        return Err(Error::Integrity("header needs height and width".into()));
    };
    let mut data = Vec::with_capacity(h * w);
    for line in lines.take(h) {
        for t in line.split_whitespace() {
            data.push(t.parse::<f64>().map_err(|_| Error::Integrity(format!("bad value `{t}`")))?);
        }
    }
    if data.len() != h * w {
        return Err(Error::Integrity(format!("expected {} values, found {}", h * w, data.len())));
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

pub fn write_pgm(path: &Path, t: &Tensor, lo: f64, hi: f64) -> Result<()> {
    Ok(write_atomic(path, &pgm_bytes(t, lo, hi)?)?)
}

pub fn write_anaglyph(path: &Path, left: &Tensor, right: &Tensor) -> Result<()> {
    Ok(write_atomic(path, &anaglyph_bytes(left, right)?)?)
}

pub fn write_sidecar(path: &Path, values: &Tensor, valid: Option<&[bool]>) -> Result<()> {
    Ok(write_atomic(path, disparity_sidecar(values, valid)?.as_bytes())?)
}
