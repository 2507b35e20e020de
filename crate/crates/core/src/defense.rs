//! Test-time ensembling defenses over a set of purposeful perturbations.
//!
//! With branches `g_1..g_N` and prior weights `w_i`, the modes compute
//!
//! | mode              | output                                               |
//! |-------------------|------------------------------------------------------|
//! | `none`            | `f(x)`                                               |
//! | `sr`              | `head(sum_i w_i * g_i^-1(enc(g_i(x))))`              |
//! | `latent_smooth`   | `head(sum_i w_i * enc(g_i(x)))`                      |
//! | `input_smooth`    | `f(sum_i w_i * g_i(x))`                              |
//! | `output_ensemble` | `sum_i w_i * f(g_i(x))`                              |
//!
//! where `enc` runs the model up to the configured tap, `head` runs the rest,
//! and `g_i^-1` is the inverse action on the tap's feature lattice. Branches
//! are always accumulated in shift-set order, so results do not depend on
//! scheduling.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::group::{GroupAction, Rounding, Shift, ShiftSet};
use crate::kernels::{PadMode, PlaneMap};
use crate::model::{accuracy_of, Model, TapPoint};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    #[default]
    None,
    Sr,
    LatentSmooth,
    InputSmooth,
    OutputEnsemble,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    #[default]
    Translate,
    Rotate,
}

fn default_rotation_step() -> f64 {
    5.0
}

/// Which ensemble to run and over which perturbations.
///
/// Translations use the grid `[-d_y, d_y] x [-d_x, d_x]`. Rotations use the
/// `2 d_x + 1` angles `k * rotation_step_deg` for `k` in `-d_x..=d_x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Report label; derived from the other fields when absent.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub mode: DefenseMode,
    #[serde(default)]
    pub d_x: usize,
    #[serde(default)]
    pub d_y: usize,
    /// Prior weights in branch order; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Tap where latent ensembling ends (`sr` and `latent_smooth`).
    #[serde(default)]
    pub tap: Option<String>,
    #[serde(default)]
    pub action: ActionKind,
    /// Fill for cells vacated by image and feature translations.
    #[serde(default)]
    pub pad: PadMode,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default = "default_rotation_step")]
    pub rotation_step_deg: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            name: None,
            mode: DefenseMode::None,
            d_x: 0,
            d_y: 0,
            weights: None,
            tap: None,
            action: ActionKind::Translate,
            pad: PadMode::Zeros,
            rounding: Rounding::Nearest,
            rotation_step_deg: default_rotation_step(),
        }
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// `mode` over the square translation grid of radius `d` at `tap`.
    pub fn translate(mode: DefenseMode, d: usize, tap: &str) -> Self {
        Self {
            mode,
            d_x: d,
            d_y: d,
            tap: Some(tap.to_string()),
            ..Self::default()
        }
    }

    pub fn sr(d: usize, tap: &str) -> Self {
        Self::translate(DefenseMode::Sr, d, tap)
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mode = match self.mode {
            DefenseMode::None => return "none".into(),
            DefenseMode::Sr => "sr",
            DefenseMode::LatentSmooth => "latent_smooth",
            DefenseMode::InputSmooth => "input_smooth",
            DefenseMode::OutputEnsemble => "output_ensemble",
        };
        let level = if self.d_x == self.d_y {
            format!("d{}", self.d_x)
        } else {
            format!("dx{}_dy{}", self.d_x, self.d_y)
        };
        let rot = if self.action == ActionKind::Rotate { "_rot" } else { "" };
        match (&self.tap, self.mode) {
            (Some(t), DefenseMode::Sr | DefenseMode::LatentSmooth) => format!("{mode}_{level}{rot}@{t}"),
            _ => format!("{mode}_{level}{rot}"),
        }
    }

    pub fn shift_set(&self) -> Result<ShiftSet> {
        let set = ShiftSet::build(self.d_x, self.d_y);
        match &self.weights {
            Some(w) => set.with_weights(w.clone()),
            None => Ok(set),
        }
    }

    /// The branch actions with their weights, in accumulation order.
    pub fn actions(&self) -> Result<Vec<(GroupAction, f64)>> {
        match self.action {
            ActionKind::Translate => {
                let set = self.shift_set()?;
                Ok(set
                    .shifts()
                    .iter()
                    .zip(set.weights())
                    .map(|(&shift, &w)| (GroupAction::Translate { shift, pad: self.pad }, w))
                    .collect())
            }
            ActionKind::Rotate => {
                if !self.rotation_step_deg.is_finite() {
                    return Err(Error::invalid("rotation_step_deg must be finite"));
                }
                let d = self.d_x as isize;
                let n = (2 * d + 1) as usize;
                let weights = match &self.weights {
                    Some(w) if w.len() != n => {
                        return Err(Error::invalid(format!("{} weights for {n} rotations", w.len())));
                    }
                    Some(w) => w.clone(),
                    None => vec![1.0 / n as f64; n],
                };
                Ok((-d..=d)
                    .zip(weights)
                    .map(|(k, w)| (GroupAction::Rotate { degrees: k as f64 * self.rotation_step_deg }, w))
                    .collect())
            }
        }
    }
}

fn is_identity(action: &GroupAction) -> bool {
    match *action {
        GroupAction::Translate { shift, .. } => shift == Shift::ZERO,
        GroupAction::Rotate { degrees } => degrees == 0.0,
    }
}

struct Branch {
    weight: f64,
    /// `None` for the identity action.
    image: Option<Arc<PlaneMap>>,
    /// Realignment on the tap lattice; `None` when it is the identity or
    /// the tap has no spatial layout.
    feature: Option<Arc<PlaneMap>>,
}

/// A model wrapped in a configured defense. Branch resampling maps are built
/// once; forward passes share them read-only.
pub struct Defense<'m> {
    model: &'m Model,
    cfg: DefenseConfig,
    tap: Option<TapPoint>,
    branches: Vec<Branch>,
}

impl<'m> Defense<'m> {
    pub fn new(model: &'m Model, cfg: DefenseConfig) -> Result<Self> {
        let tap = match (&cfg.tap, cfg.mode) {
            (Some(name), _) => Some(model.tap(name)?.clone()),
            (None, DefenseMode::Sr | DefenseMode::LatentSmooth) => {
                return Err(Error::invalid(format!("defense mode {:?} needs a tap", cfg.mode)));
            }
            (None, _) => None,
        };
        let branches = if cfg.mode == DefenseMode::None {
            Vec::new()
        } else {
            let (h, w) = (model.input_shape()[1], model.input_shape()[2]);
            cfg.actions()?
                .into_iter()
                .map(|(action, weight)| {
                    if is_identity(&action) {
                        return Ok(Branch {
                            weight,
                            image: None,
                            feature: None,
                        });
                    }
                    let image = Some(Arc::new(action.image_map(h, w)?));
                    let feature = match &tap {
                        Some(t) if t.is_spatial() && cfg.mode == DefenseMode::Sr => Some(Arc::new(
                            action.inverse_feature_map(t.shape[1], t.shape[2], t.cumulative_stride, cfg.rounding)?,
                        )),
                        _ => None,
                    };
                    Ok(Branch { weight, image, feature })
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            model,
            cfg,
            tap,
            branches,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.cfg
    }

    /// Number of model evaluations per forward pass.
    pub fn branch_count(&self) -> usize {
        self.branches.len().max(1)
    }

    fn combine(g: &mut Graph, parts: Vec<Var>, weights: &[f64]) -> Result<Var> {
        if parts.len() == 1 && weights[0] == 1.0 {
            return Ok(parts[0]);
        }
        g.weighted_sum(&parts, weights)
    }

    fn branch_input(g: &mut Graph, x: Var, b: &Branch) -> Result<Var> {
        match &b.image {
            Some(m) => g.resample(x, m.clone()),
            None => Ok(x),
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.weight).collect()
    }

    /// Ensembled features at the tap, as seen by the layers after it.
    pub fn features_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let tap = self
            .tap
            .as_ref()
            .ok_or_else(|| Error::invalid("feature extraction needs a tap"))?;
        let k = tap.layer_index;
        match self.cfg.mode {
            DefenseMode::None => self.model.forward_range(g, params, x, 0, k),
            DefenseMode::Sr | DefenseMode::LatentSmooth => {
                let mut parts = Vec::with_capacity(self.branches.len());
                for b in &self.branches {
                    let xi = Self::branch_input(g, x, b)?;
                    let fi = self.model.forward_range(g, params, xi, 0, k)?;
                    parts.push(match &b.feature {
                        Some(m) => g.resample(fi, m.clone())?,
                        None => fi,
                    });
                }
                Self::combine(g, parts, &self.weights())
            }
            DefenseMode::InputSmooth => {
                let xs = self.smoothed_input(g, x)?;
                self.model.forward_range(g, params, xs, 0, k)
            }
            DefenseMode::OutputEnsemble => Err(Error::invalid("output_ensemble has no single latent feature")),
        }
    }

    fn smoothed_input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            parts.push(Self::branch_input(g, x, b)?);
        }
        Self::combine(g, parts, &self.weights())
    }

    /// Defended logits on the graph; differentiable with respect to `x`.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let last = self.model.num_layers();
        match self.cfg.mode {
            DefenseMode::None => self.model.forward_graph(g, params, x),
            DefenseMode::Sr | DefenseMode::LatentSmooth => {
                let f = self.features_graph(g, params, x)?;
                let k = self.tap.as_ref().expect("checked in new").layer_index;
                self.model.forward_range(g, params, f, k, last)
            }
            DefenseMode::InputSmooth => {
                let xs = self.smoothed_input(g, x)?;
                self.model.forward_graph(g, params, xs)
            }
            DefenseMode::OutputEnsemble => {
                let mut parts = Vec::with_capacity(self.branches.len());
                for b in &self.branches {
                    let xi = Self::branch_input(g, x, b)?;
                    parts.push(self.model.forward_graph(g, params, xi)?);
                }
                Self::combine(g, parts, &self.weights())
            }
        }
    }

    fn eval(&self, x: &Tensor, features: bool) -> Result<Tensor> {
        Model::map_chunks(x, |c| {
            let mut g = Graph::new();
            let params = self.model.bind(&mut g, false);
            let xv = g.constant(c.clone());
            let out = if features {
                self.features_graph(&mut g, &params, xv)?
            } else {
                self.forward_graph(&mut g, &params, xv)?
            };
            Ok(g.value(out).clone())
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, false)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, true)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.forward(x)?.argmax_rows()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        accuracy_of(&self.predict(x)?, labels)
    }

    /// Per-sample correctness flags.
    pub fn correct(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<bool>> {
        Ok(self.predict(x)?.iter().zip(labels).map(|(p, l)| p == l).collect())
    }
}

/// Defended logits for `x`.
pub fn sr_forward(model: &Model, x: &Tensor, cfg: &DefenseConfig) -> Result<Tensor> {
    Defense::new(model, cfg.clone())?.forward(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMetric {
    L2,
    /// `1 - cos(a, b)`; zero vectors are at distance 0 from each other and
    /// 1 from anything else.
    Cosine,
}

/// Distance between two equally shaped feature tensors, taken over all
/// elements.
pub fn feature_distance(a: &Tensor, b: &Tensor, metric: FeatureMetric) -> Result<f64> {
    a.expect_same_shape("feature_distance", b)?;
    let (x, y) = (a.data(), b.data());
    Ok(match metric {
        FeatureMetric::L2 => x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
        FeatureMetric::Cosine => {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            match (na == 0.0, nb == 0.0) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                _ => (1.0 - dot / (na * nb)).max(0.0),
            }
        }
    })
}
