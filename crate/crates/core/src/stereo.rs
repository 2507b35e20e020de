//! Random-dot stereograms with exact disparity, a differentiable
//! cost-volume matcher whose feature extractor can run under any defense,
//! and the usual disparity metrics.
//!
//! The matcher encodes the left image once and the right image once per
//! candidate disparity `d`, after translating it right by `d` pixels, so
//! left and right features always sit on the same lattice even when the
//! encoder downsamples. Costs are mean squared feature differences; the
//! prediction is the soft-argmin `sum_d d * softmax(-cost / T)_d`, upsampled
//! back to full resolution by nearest-neighbour replication.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{dense_error, run_attack, AttackConfig, AttackKind, Objective};
use crate::defense::{Defense, DefenseConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::group::{translation_map, Shift};
use crate::kernels::{PadMode, PlaneMap};
use crate::model::{Layer, Model, ModelSpec, TapSpec, TrainingMeta, WeightBundle};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Each dot is one of two levels.
    #[default]
    Binary,
    /// Each dot is uniform between the two levels.
    Gray,
}

fn d_blocks() -> usize {
    3
}
fn d_contrast() -> f64 {
    1.0
}
fn d_block_size() -> (usize, usize) {
    (8, 20)
}
fn d_dot() -> usize {
    1
}

/// Scene layout and texture of a stereogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStructure {
    /// Rectangles in front of a zero-disparity background. Each gets a
    /// distinct disparity in `1..=d_max` (while enough values remain).
    #[serde(default = "d_blocks")]
    pub blocks: usize,
    /// Inclusive side-length range of the rectangles.
    #[serde(default = "d_block_size")]
    pub block_size: (usize, usize),
    #[serde(default)]
    pub texture: Texture,
    /// Dot levels are `0.5 -/+ contrast / 2`.
    #[serde(default = "d_contrast")]
    pub contrast: f64,
    /// Side length of a dot in pixels.
    #[serde(default = "d_dot")]
    pub dot_size: usize,
}

impl Default for BlockStructure {
    fn default() -> Self {
        Self {
            blocks: d_blocks(),
            block_size: d_block_size(),
            texture: Texture::Binary,
            contrast: d_contrast(),
            dot_size: d_dot(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// `[H, W]` integer disparities, indexed by left-image pixel.
    pub gt_disparity: Tensor,
    /// Left pixels visible in the right image.
    pub valid: Vec<bool>,
    pub d_max: usize,
}

impl StereoPair {
    pub fn height(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[3]
    }
}

/// Random-dot pair in which `right[y, x - gt[y, x]] == left[y, x]` on every
/// valid pixel. Requires `d_max < w / 4`.
pub fn gen_random_dot_stereogram(
    h: usize,
    w: usize,
    d_max: usize,
    structure: &BlockStructure,
    seed: u64,
) -> Result<StereoPair> {
    if h == 0 || w == 0 || 4 * d_max >= w {
        return Err(Error::invalid(format!("stereogram needs d_max < w / 4, got d_max {d_max}, w {w}")));
    }
    let s = structure;
    if !(0.0..=1.0).contains(&s.contrast) || s.dot_size == 0 {
        return Err(Error::invalid("contrast must lie in [0, 1] and dot_size be positive"));
    }
    let (lo_side, hi_side) = s.block_size;
    if lo_side == 0 || lo_side > hi_side {
        return Err(Error::invalid(format!("bad block size range {:?}", s.block_size)));
    }
    let mut rng = seed::rng(seed);
    let (dark, light) = (0.5 - s.contrast / 2.0, 0.5 + s.contrast / 2.0);
    let dots = |rng: &mut rand_chacha::ChaCha8Rng, hh: usize, ww: usize| -> Vec<f64> {
        let (ch, cw) = (hh.div_ceil(s.dot_size), ww.div_ceil(s.dot_size));
        let cells: Vec<f64> = (0..ch * cw)
            .map(|_| match s.texture {
                Texture::Binary => {
                    if rng.random_bool(0.5) {
                        light
                    } else {
                        dark
                    }
                }
                Texture::Gray => rng.random_range(dark..=light),
            })
            .collect();
        (0..hh * ww)
            .map(|p| cells[(p / ww / s.dot_size) * cw + (p % ww) / s.dot_size])
            .collect()
    };

    // Disparity field: background 0, rectangles painted far to near.
    let mut depths: Vec<usize> = (1..=d_max).collect();
    depths.shuffle(&mut rng);
    let mut rects = Vec::with_capacity(s.blocks);
    for k in 0..s.blocks {
        let bh = rng.random_range(lo_side..=hi_side).min(h);
        let bw = rng.random_range(lo_side..=hi_side).min(w);
        let y0 = rng.random_range(0..=h - bh);
        let x0 = rng.random_range(0..=w - bw);
        let d = depths.get(k).copied().unwrap_or(if d_max == 0 { 0 } else { rng.random_range(1..=d_max) });
        rects.push((d, y0, x0, bh, bw));
    }
    rects.sort_by_key(|r| r.0);
    let mut gt = vec![0usize; h * w];
    for &(d, y0, x0, bh, bw) in &rects {
        for y in y0..y0 + bh {
            gt[y * w + x0..y * w + x0 + bw].fill(d);
        }
    }

    let left = dots(&mut rng, h, w);
    // Near surfaces win: keep the largest disparity landing on each right pixel.
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = gt[y * w + x];
            if x < d {
                continue;
            }
            let r = y * w + x - d;
            match owner[r] {
                Some(o) if gt[o] >= d => {}
                _ => owner[r] = Some(y * w + x),
            }
        }
    }
    let fill = dots(&mut rng, h, w);
    let right: Vec<f64> = owner
        .iter()
        .zip(&fill)
        .map(|(o, &f)| o.map_or(f, |src| left[src]))
        .collect();
    let valid: Vec<bool> = (0..h * w)
        .map(|p| {
            let d = gt[p];
            let x = p % w;
            x >= d && owner[p - d] == Some(p)
        })
        .collect();
    Ok(StereoPair {
        left: Tensor::new(vec![1, 1, h, w], left)?,
        right: Tensor::new(vec![1, 1, h, w], right)?,
        gt_disparity: Tensor::new(vec![h, w], gt.iter().map(|&d| d as f64).collect())?,
        valid,
        d_max,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    /// `[H, W]` disparities in pixels.
    pub values: Tensor,
    /// Pixels whose every candidate match stays inside the right image.
    pub valid_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percentage of pixels with `|e| > max(3, 0.05 * gt)`.
    pub d1: f64,
}

/// Metrics over pixels valid in both `pred` and `gt_valid`.
pub fn stereo_metrics(pred: &DisparityMap, gt: &Tensor, gt_valid: &[bool]) -> Result<StereoMetrics> {
    pred.values.expect_same_shape("stereo_metrics", gt)?;
    if gt_valid.len() != gt.numel() || pred.valid_mask.len() != gt.numel() {
        return Err(Error::shape("stereo_metrics", "mask length differs from map size"));
    }
    let (mut n, mut abs, mut sq, mut bad) = (0usize, 0.0, 0.0, 0usize);
    for i in 0..gt.numel() {
        if !(gt_valid[i] && pred.valid_mask[i]) {
            continue;
        }
        let g = gt.data()[i];
        let e = (pred.values.data()[i] - g).abs();
        n += 1;
        abs += e;
        sq += e * e;
        if e > 3.0_f64.max(0.05 * g) {
            bad += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no valid pixels to evaluate"));
    }
    let nf = n as f64;
    Ok(StereoMetrics {
        mae: abs / nf,
        rmse: (sq / nf).sqrt(),
        d1: 100.0 * bad as f64 / nf,
    })
}

/// `100 * (undefended - defended) / undefended`.
pub fn error_reduced(undefended: f64, defended: f64) -> f64 {
    if undefended == 0.0 {
        0.0
    } else {
        100.0 * (undefended - defended) / undefended
    }
}

/// `[c * k * k, c, k, k]` weight copying each offset of a `k x k`
/// neighbourhood into its own channel.
fn patch_weight(c: usize, k: usize) -> Tensor {
    let kk = k * k;
    Tensor::from_fn(vec![c * kk, c, k, k], |i| {
        // Output channel o = ci * kk + offset reads input channel ci at offset.
        let o = i / (c * kk);
        let rest = i % (c * kk);
        let (ci, off) = (rest / kk, rest % kk);
        if o == ci * kk + off {
            1.0
        } else {
            0.0
        }
    })
}

fn patch_conv(c: usize, k: usize, pad_mode: PadMode) -> Layer {
    Layer::Conv {
        out_channels: c * k * k,
        kernel: k,
        stride: 1,
        padding: k / 2,
        pad_mode,
        bias: false,
    }
}

fn features_spec(in_shape: [usize; 3], layers: Vec<Layer>) -> ModelSpec {
    let n = layers.len();
    ModelSpec {
        input_shape: in_shape.to_vec(),
        num_classes: None,
        layers,
        taps: vec![TapSpec {
            name: "features".into(),
            layer_index: n,
        }],
    }
}

/// Encoder whose features are the raw `k x k` neighbourhood of every pixel
/// (one channel per offset), optionally average-pooled by `pool`. The tap
/// is called `features`.
pub fn patch_encoder(in_shape: [usize; 3], k: usize, pool: usize, pad_mode: PadMode) -> Result<Model> {
    let c = in_shape[0];
    let mut layers = vec![patch_conv(c, k, pad_mode)];
    if pool > 1 {
        layers.push(Layer::AvgPool { size: pool });
    }
    let bundle = WeightBundle {
        params: vec![("layer0.weight".into(), patch_weight(c, k))],
        meta: TrainingMeta::default(),
    };
    Model::from_bundle(features_spec(in_shape, layers), &bundle)
}

/// Keeps every `stride`-th pixel in both directions, then takes the `k x k`
/// neighbourhood on that coarse lattice. Only one pixel phase in
/// `stride * stride` reaches the features, so the encoder is as far from
/// shift invariant as a strided network gets. Tap `features`.
pub fn subsampled_patch_encoder(in_shape: [usize; 3], stride: usize, k: usize, pad_mode: PadMode) -> Result<Model> {
    let c = in_shape[0];
    let layers = vec![
        Layer::Conv {
            out_channels: c,
            kernel: 1,
            stride,
            padding: 0,
            pad_mode: PadMode::Zeros,
            bias: false,
        },
        patch_conv(c, k, pad_mode),
    ];
    let bundle = WeightBundle {
        params: vec![
            ("layer0.weight".into(), patch_weight(c, 1)),
            ("layer1.weight".into(), patch_weight(c, k)),
        ],
        meta: TrainingMeta::default(),
    };
    Model::from_bundle(features_spec(in_shape, layers), &bundle)
}

fn d_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub d_max: usize,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Fill for the right image when it is translated by a candidate
    /// disparity.
    #[serde(default)]
    pub candidate_pad: PadMode,
}

/// Cost-volume matcher over an encoder tap, with the feature extractor run
/// through a [`Defense`].
pub struct StereoMatcher<'m> {
    defense: Defense<'m>,
    cfg: MatcherConfig,
    stride: usize,
    feat_hw: (usize, usize),
    img_hw: (usize, usize),
    candidates: Vec<Arc<PlaneMap>>,
    upsample: Option<Arc<PlaneMap>>,
    disparity_weights: Tensor,
}

impl<'m> StereoMatcher<'m> {
    /// `defense.tap` is overridden with `tap`; `mode = none` gives the plain
    /// matcher.
    pub fn new(encoder: &'m Model, tap: &str, defense: DefenseConfig, cfg: MatcherConfig) -> Result<Self> {
        if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", cfg.temperature)));
        }
        let t = encoder.tap(tap)?.clone();
        if !t.is_spatial() {
            return Err(Error::invalid(format!("tap `{tap}` is not a spatial feature map")));
        }
        let (h, w) = (encoder.input_shape()[1], encoder.input_shape()[2]);
        let (fh, fw) = (t.shape[1], t.shape[2]);
        if cfg.d_max >= fw {
            return Err(Error::invalid(format!(
                "d_max {} must be below the feature width {fw}",
                cfg.d_max
            )));
        }
        let s = t.cumulative_stride;
        if fh * s != h || fw * s != w {
            return Err(Error::invalid(format!(
                "tap `{tap}` at stride {s} has {fh}x{fw} cells for a {h}x{w} image"
            )));
        }
        let candidates = (0..=cfg.d_max)
            .map(|d| translation_map(h, w, Shift::new(0, d as isize), cfg.candidate_pad).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let upsample = (s > 1).then(|| {
            Arc::new(PlaneMap::from_fn((fh, fw), (h, w), |y, x, taps| {
                taps.push(((y / s) * fw + x / s, 1.0));
            }))
        });
        let n = cfg.d_max + 1;
        let disparity_weights = Tensor::from_fn(vec![1, n, 1, 1], |d| d as f64);
        let defense = Defense::new(
            encoder,
            DefenseConfig {
                tap: Some(tap.to_string()),
                ..defense
            },
        )?;
        Ok(Self {
            defense,
            cfg,
            stride: s,
            feat_hw: (fh, fw),
            img_hw: (h, w),
            candidates,
            upsample,
            disparity_weights,
        })
    }

    pub fn defense(&self) -> &Defense<'m> {
        &self.defense
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.cfg
    }

    /// Cost volume `[1, D + 1, h, w]` on the feature lattice.
    pub fn cost_volume_graph(&self, g: &mut Graph, params: &[Var], left: Var, right: Var) -> Result<Var> {
        let fl = self.defense.features_graph(g, params, left)?;
        let k = g.shape(fl)[1] as f64;
        let mut costs = Vec::with_capacity(self.candidates.len());
        for map in &self.candidates {
            let rd = g.resample(right, map.clone())?;
            let fr = self.defense.features_graph(g, params, rd)?;
            let diff = g.sub(fl, fr)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum_axis(sq, 1)?;
            costs.push(g.scale(s, 1.0 / k));
        }
        g.concat(&costs, 1)
    }

    /// Soft-argmin disparity `[1, 1, H, W]`, differentiable in both images.
    pub fn disparity_graph(&self, g: &mut Graph, params: &[Var], left: Var, right: Var) -> Result<Var> {
        let cost = self.cost_volume_graph(g, params, left, right)?;
        let logits = g.scale(cost, -1.0 / self.cfg.temperature);
        let prob = g.softmax(logits, 1)?;
        let wd = g.constant(self.disparity_weights.clone());
        let disp = g.conv2d(prob, wd, None, 1, 0, PadMode::Zeros)?;
        match &self.upsample {
            Some(m) => g.resample(disp, m.clone()),
            None => Ok(disp),
        }
    }

    /// Columns `x >= d_max` (rounded up to whole feature cells), where every
    /// candidate reads real right-image pixels.
    pub fn valid_mask(&self) -> Vec<bool> {
        let (h, w) = self.img_hw;
        let first = self.cfg.d_max.div_ceil(self.stride) * self.stride;
        (0..h * w).map(|p| p % w >= first).collect()
    }

    fn check_pair(&self, left: &Tensor, right: &Tensor) -> Result<()> {
        let want = [1, self.defense.model().input_shape()[0], self.img_hw.0, self.img_hw.1];
        if left.shape() != want || right.shape() != want {
            return Err(Error::shape(
                "stereo_match",
                format!("expected {want:?}, got {:?} and {:?}", left.shape(), right.shape()),
            ));
        }
        Ok(())
    }

    pub fn predict_images(&self, left: &Tensor, right: &Tensor) -> Result<DisparityMap> {
        self.check_pair(left, right)?;
        let mut g = Graph::new();
        let params = self.defense.model().bind(&mut g, false);
        let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
        let d = self.disparity_graph(&mut g, &params, l, r)?;
        Ok(DisparityMap {
            values: g.value(d).reshape(vec![self.img_hw.0, self.img_hw.1])?,
            valid_mask: self.valid_mask(),
        })
    }

    pub fn predict(&self, pair: &StereoPair) -> Result<DisparityMap> {
        self.predict_images(&pair.left, &pair.right)
    }

    /// Hard argmin of the cost volume (lowest disparity on ties), upsampled
    /// like the soft prediction.
    pub fn hard_argmin(&self, pair: &StereoPair) -> Result<DisparityMap> {
        self.check_pair(&pair.left, &pair.right)?;
        let mut g = Graph::new();
        let params = self.defense.model().bind(&mut g, false);
        let (l, r) = (g.constant(pair.left.clone()), g.constant(pair.right.clone()));
        let cost = self.cost_volume_graph(&mut g, &params, l, r)?;
        let c = g.value(cost);
        let (fh, fw) = self.feat_hw;
        let n = self.cfg.d_max + 1;
        let best: Vec<f64> = (0..fh * fw)
            .map(|p| {
                (0..n)
                    .fold((0, f64::INFINITY), |(bd, bc), d| {
                        let v = c.data()[d * fh * fw + p];
                        if v < bc {
                            (d, v)
                        } else {
                            (bd, bc)
                        }
                    })
                    .0 as f64
            })
            .collect();
        let (h, w) = self.img_hw;
        let s = self.stride;
        let values = Tensor::from_fn(vec![h, w], |p| best[(p / w / s) * fw + (p % w) / s]);
        Ok(DisparityMap {
            values,
            valid_mask: self.valid_mask(),
        })
    }

    /// `[1, 1, H, W]` mask of pixels counted by metrics and dense attacks.
    pub fn evaluation_mask(&self, pair: &StereoPair) -> Result<Tensor> {
        let vm = self.valid_mask();
        let (h, w) = self.img_hw;
        Tensor::new(
            vec![1, 1, h, w],
            vm.iter()
                .zip(&pair.valid)
                .map(|(&a, &b)| if a && b { 1.0 } else { 0.0 })
                .collect(),
        )
    }
}

/// Dense error of a matcher's disparity against a frozen target field.
pub struct StereoObjective<'a> {
    pub matcher: &'a StereoMatcher<'a>,
    /// `[1, 1, H, W]`, never updated during the attack.
    pub target: Tensor,
    pub mask: Tensor,
    pub cfg: AttackConfig,
}

impl Objective for StereoObjective<'_> {
    fn loss(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        let params = self.matcher.defense().model().bind(g, false);
        let d = self.matcher.disparity_graph(g, &params, inputs[0], inputs[1])?;
        dense_error(g, d, &self.target, &self.mask, self.cfg.objective)
    }
}

/// Attacks the pair through `matcher` (undefended for a transfer attack, the
/// defended matcher for an adaptive one). `target` is the `[H, W]` field the
/// error is measured against, usually the ground truth or the clean
/// prediction. Returns the attacked left and right images.
pub fn attack_stereo(
    matcher: &StereoMatcher,
    pair: &StereoPair,
    target: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Tensor, Tensor)> {
    if matches!(cfg.kind, AttackKind::CwMargin) {
        return Err(Error::invalid("margin attacks need class labels; use fgsm, pgd or dense_pgd"));
    }
    let (h, w) = (pair.height(), pair.width());
    let obj = StereoObjective {
        matcher,
        target: target.reshape(vec![1, 1, h, w])?,
        mask: matcher.evaluation_mask(pair)?,
        cfg: cfg.clone(),
    };
    let mut adv = run_attack(&obj, &[pair.left.clone(), pair.right.clone()], cfg)?;
    let right = adv.pop().expect("two inputs").x_adv;
    let left = adv.pop().expect("two inputs").x_adv;
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_disparity_pair_is_identical() {
        let p = gen_random_dot_stereogram(16, 32, 0, &BlockStructure::default(), 3).unwrap();
        assert_eq!(p.left, p.right);
        assert!(p.gt_disparity.data().iter().all(|&d| d == 0.0));
        assert!(p.valid.iter().all(|&v| v));
    }

    #[test]
    fn warp_consistency() {
        for seed in 0..5 {
            let p = gen_random_dot_stereogram(24, 48, 6, &BlockStructure::default(), seed).unwrap();
            let w = p.width();
            let mut valid = 0;
            for (i, &ok) in p.valid.iter().enumerate() {
                if ok {
                    let d = p.gt_disparity.data()[i] as usize;
                    assert_eq!(p.left.data()[i], p.right.data()[i - d]);
                    valid += 1;
                }
                assert!(p.gt_disparity.data()[i] <= 6.0);
                assert!(i % w >= p.gt_disparity.data()[i] as usize || !ok);
            }
            assert!(valid > p.valid.len() / 2);
        }
    }

    #[test]
    fn d_max_bound() {
        assert!(gen_random_dot_stereogram(16, 32, 8, &BlockStructure::default(), 0).is_err());
    }

    #[test]
    fn metric_examples() {
        let gt = Tensor::full(vec![2, 3], 50.0);
        let all = vec![true; 6];
        let map = |v: f64| DisparityMap {
            values: Tensor::full(vec![2, 3], v),
            valid_mask: all.clone(),
        };
        let m = stereo_metrics(&map(50.0), &gt, &all).unwrap();
        assert_eq!((m.mae, m.rmse, m.d1), (0.0, 0.0, 0.0));
        let m = stereo_metrics(&map(54.0), &gt, &all).unwrap();
        assert_eq!((m.mae, m.rmse, m.d1), (4.0, 4.0, 100.0));
        let gt100 = Tensor::full(vec![2, 3], 100.0);
        assert_eq!(stereo_metrics(&map(102.0), &gt100, &all).unwrap().d1, 0.0);
        assert!(stereo_metrics(&map(1.0), &gt, &[false; 6]).is_err());
        assert_eq!(error_reduced(10.0, 7.0), 30.0);
    }

    #[test]
    fn patch_encoder_copies_neighbourhoods() {
        let m = patch_encoder([1, 4, 4], 3, 1, PadMode::Zeros).unwrap();
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64);
        let f = m.forward_to_tap(&x, "features").unwrap();
        // Channel 4 is the centre offset.
        assert_eq!(&f.data()[4 * 16..5 * 16], x.data());
        // Channel 0 is offset (-1, -1): pixel (1, 1) reads pixel (0, 0).
        assert_eq!(f.get(&[0, 0, 1, 1]), 0.0);
        assert_eq!(f.get(&[0, 0, 2, 2]), 5.0);
    }

    #[test]
    fn subsampled_encoder_reads_one_phase() {
        let m = subsampled_patch_encoder([1, 4, 6], 2, 3, PadMode::Zeros).unwrap();
        assert_eq!(m.tap("features").unwrap().cumulative_stride, 2);
        let x = Tensor::from_fn(vec![1, 1, 4, 6], |i| i as f64);
        let f = m.forward_to_tap(&x, "features").unwrap();
        assert_eq!(f.shape(), &[1, 9, 2, 3]);
        // Centre channel holds the even-even pixels.
        assert_eq!(&f.data()[4 * 6..5 * 6], &[0.0, 2.0, 4.0, 12.0, 14.0, 16.0]);
    }
}
