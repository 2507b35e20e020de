//! White-box ℓ∞ attacks: FGSM, PGD, a margin-loss (C&W style) PGD and
//! dense-field PGD, plus the worst-case ensemble metric.
//!
//! Every attack ascends a scalar [`Objective`] built on a fresh [`Graph`]
//! from the (possibly several) attacked inputs. Inputs live in `[0, 1]`;
//! after every step the iterate is projected onto the ε-ball around the
//! clean input and then clipped to the valid range.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::graph::{sign, Graph, Var};
use crate::seed::{self, derive_seed};
use crate::tensor::Tensor;

const SAMPLE_STREAM: u64 = 0x4154_4b53;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    #[default]
    Pgd,
    CwMargin,
    DensePgd,
}

/// Error measure ascended by dense attacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseObjective {
    /// Mean Euclidean distance between field vectors (channel axis).
    Epe,
    /// Mean absolute difference.
    #[default]
    Mae,
}

/// Which inputs of a multi-input attack carry perturbations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    #[default]
    All,
    First,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Report label; derived from the other fields when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: AttackKind,
    pub epsilon: f64,
    #[serde(default = "one")]
    pub steps: usize,
    /// Step size; `2.5 * epsilon / steps` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    /// Differentiate through the evaluated defense instead of the bare model.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default)]
    pub seed: u64,
    /// Confidence margin of the margin loss.
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub objective: DenseObjective,
    #[serde(default)]
    pub perturb: PerturbTarget,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64, steps: usize) -> Self {
        Self {
            name: None,
            kind,
            epsilon,
            steps,
            alpha: None,
            random_start: false,
            adaptive: false,
            seed: 0,
            kappa: 0.0,
            objective: DenseObjective::Mae,
            perturb: PerturbTarget::All,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackKind::Fgsm, epsilon, 1)
    }

    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self::new(AttackKind::Pgd, epsilon, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.kind == AttackKind::Fgsm && self.steps != 1 {
            return Err(Error::invalid(format!("fgsm takes exactly one step, got {}", self.steps)));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::invalid(format!("alpha must be finite and >= 0, got {a}")));
            }
        }
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(Error::invalid("kappa must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let base = match self.kind {
            AttackKind::Fgsm => "fgsm".to_string(),
            AttackKind::Pgd => format!("pgd{}", self.steps),
            AttackKind::CwMargin => format!("cw{}", self.steps),
            AttackKind::DensePgd => format!("dense_pgd{}", self.steps),
        };
        if self.adaptive {
            format!("{base}_adaptive")
        } else {
            base
        }
    }
}

/// A scalar function of the attacked inputs, to be maximized.
pub trait Objective: Sync {
    fn loss(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    fn loss(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        self(g, inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialExample {
    pub x_adv: Tensor,
    pub x_clean: Tensor,
    pub achieved_linf: f64,
    /// Objective value before each executed step.
    pub loss_trace: Vec<f64>,
}

impl AdversarialExample {
    fn new(x_adv: Tensor, x_clean: Tensor, loss_trace: Vec<f64>) -> Result<Self> {
        let achieved_linf = x_adv.linf_distance(&x_clean)?;
        Ok(Self {
            x_adv,
            x_clean,
            achieved_linf,
            loss_trace,
        })
    }
}

/// Loss value and input gradients at `xs`.
fn loss_and_grads(obj: &dyn Objective, xs: &[Tensor], active: &[bool]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .zip(active)
        .map(|(x, &a)| if a { g.leaf(x.clone()) } else { g.constant(x.clone()) })
        .collect();
    let loss = obj.loss(&mut g, &vars)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(active)
        .map(|(&v, &a)| if a { grads.wrt(v).cloned().map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, out))
}

fn active_mask(n: usize, target: PerturbTarget) -> Vec<bool> {
    (0..n).map(|i| target == PerturbTarget::All || i == 0).collect()
}

fn check_inputs(xs: &[Tensor]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::invalid("attack needs at least one input"));
    }
    for x in xs {
        if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("attack inputs must lie in [0, 1]"));
        }
    }
    Ok(())
}

/// One signed-gradient step of size ε from the clean inputs:
/// `clip(x + ε · sign(∇ loss))`.
pub fn fgsm_multi(obj: &dyn Objective, xs: &[Tensor], cfg: &AttackConfig) -> Result<Vec<AdversarialExample>> {
    cfg.validate()?;
    check_inputs(xs)?;
    let active = active_mask(xs.len(), cfg.perturb);
    let eps = cfg.epsilon;
    let (value, grads) = loss_and_grads(obj, xs, &active)?;
    xs.iter()
        .zip(grads)
        .map(|(x, gr)| {
            let adv = match gr {
                Some(gr) => x.zip_map(&gr, |v, d| (v + eps * sign(d)).clamp(0.0, 1.0))?,
                None => x.clone(),
            };
            AdversarialExample::new(adv, x.clone(), vec![value])
        })
        .collect()
}

/// Projected signed-gradient ascent. Stops early once the gradient vanishes
/// on every attacked input.
pub fn pgd_multi(obj: &dyn Objective, xs: &[Tensor], cfg: &AttackConfig) -> Result<Vec<AdversarialExample>> {
    cfg.validate()?;
    check_inputs(xs)?;
    let active = active_mask(xs.len(), cfg.perturb);
    let (eps, alpha) = (cfg.epsilon, cfg.step_size());
    let project = |v: f64, x0: f64| v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    let mut cur: Vec<Tensor> = xs.to_vec();
    if cfg.random_start {
        let mut rng = seed::rng(cfg.seed);
        for (c, (&a, x0)) in cur.iter_mut().zip(active.iter().zip(xs)) {
            if a && eps > 0.0 {
                let noisy: Vec<f64> = x0
                    .data()
                    .iter()
                    .map(|&v| project(v + rng.random_range(-eps..=eps), v))
                    .collect();
                *c = Tensor::new(x0.shape().to_vec(), noisy)?;
            }
        }
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (value, grads) = loss_and_grads(obj, &cur, &active)?;
        trace.push(value);
        let mut moved = false;
        for ((c, x0), gr) in cur.iter_mut().zip(xs).zip(grads) {
            let Some(gr) = gr else { continue };
            moved |= gr.data().iter().any(|&d| d != 0.0);
            let next: Vec<f64> = c
                .data()
                .iter()
                .zip(gr.data())
                .zip(x0.data())
                .map(|((&v, &d), &o)| project(v + alpha * sign(d), o))
                .collect();
            *c = Tensor::new(c.shape().to_vec(), next)?;
        }
        if !moved {
            break;
        }
    }
    cur.into_iter()
        .zip(xs)
        .map(|(adv, x)| AdversarialExample::new(adv, x.clone(), trace.clone()))
        .collect()
}

fn single(mut v: Vec<AdversarialExample>) -> AdversarialExample {
    v.pop().expect("one input, one example")
}

pub fn fgsm(obj: &dyn Objective, x: &Tensor, cfg: &AttackConfig) -> Result<AdversarialExample> {
    fgsm_multi(obj, std::slice::from_ref(x), cfg).map(single)
}

pub fn pgd(obj: &dyn Objective, x: &Tensor, cfg: &AttackConfig) -> Result<AdversarialExample> {
    pgd_multi(obj, std::slice::from_ref(x), cfg).map(single)
}

/// Dispatches on `cfg.kind`; margin and dense attacks run the PGD loop on
/// whatever objective they are given.
pub fn run_attack(obj: &dyn Objective, xs: &[Tensor], cfg: &AttackConfig) -> Result<Vec<AdversarialExample>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm_multi(obj, xs, cfg),
        AttackKind::Pgd | AttackKind::CwMargin | AttackKind::DensePgd => pgd_multi(obj, xs, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierLossKind {
    CrossEntropy,
    /// Negated margin `-max(z_y - max_{c != y} z_c, -κ)`.
    Margin { kappa_bits: u64 },
}

/// Classification loss of a (possibly defended) model against fixed labels.
pub struct ClassifierLoss<'a> {
    pub defense: &'a Defense<'a>,
    pub labels: Vec<usize>,
    pub kind: ClassifierLossKind,
}

impl<'a> ClassifierLoss<'a> {
    pub fn cross_entropy(defense: &'a Defense<'a>, labels: Vec<usize>) -> Self {
        Self {
            defense,
            labels,
            kind: ClassifierLossKind::CrossEntropy,
        }
    }

    pub fn margin(defense: &'a Defense<'a>, labels: Vec<usize>, kappa: f64) -> Self {
        Self {
            defense,
            labels,
            kind: ClassifierLossKind::Margin {
                kappa_bits: kappa.to_bits(),
            },
        }
    }

    /// The loss an attack of `cfg.kind` ascends.
    pub fn for_attack(defense: &'a Defense<'a>, labels: Vec<usize>, cfg: &AttackConfig) -> Self {
        match cfg.kind {
            AttackKind::CwMargin => Self::margin(defense, labels, cfg.kappa),
            _ => Self::cross_entropy(defense, labels),
        }
    }
}

impl Objective for ClassifierLoss<'_> {
    fn loss(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        let params = self.defense.model().bind(g, false);
        let logits = self.defense.forward_graph(g, &params, inputs[0])?;
        match self.kind {
            ClassifierLossKind::CrossEntropy => g.cross_entropy(logits, &self.labels),
            ClassifierLossKind::Margin { kappa_bits } => {
                let m = g.margin_loss(logits, &self.labels, f64::from_bits(kappa_bits))?;
                Ok(g.scale(m, -1.0))
            }
        }
    }
}

/// Recomposes `loss` so its gradients flow through every branch of `defense`.
pub fn make_adaptive<'a>(loss: ClassifierLoss<'a>, defense: &'a Defense<'a>) -> ClassifierLoss<'a> {
    ClassifierLoss { defense, ..loss }
}

/// Attacks each sample of `x` independently (in parallel) through
/// `defense`. Sample `i` uses the sub-seed `derive_seed(cfg.seed, _, i)`, so
/// results do not depend on thread count or batch composition.
pub fn attack_classifier(defense: &Defense, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = x.shape()[0];
    if labels.len() != n {
        return Err(Error::shape("attack_classifier", format!("{} labels for {n} samples", labels.len())));
    }
    let advs = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.narrow_batch(i, 1)?;
            let sub = AttackConfig {
                seed: derive_seed(cfg.seed, SAMPLE_STREAM, i as u64),
                ..cfg.clone()
            };
            let obj = ClassifierLoss::for_attack(defense, vec![labels[i]], &sub);
            Ok(single(run_attack(&obj, std::slice::from_ref(&xi), &sub)?).x_adv)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat_batch(&advs)
}

/// Graph expression for the masked error between a predicted field
/// `[B, C, H, W]` and a fixed target of the same shape. `mask` holds 1 on
/// pixels that count and 0 elsewhere, shaped `[B, 1, H, W]`.
pub fn dense_error(g: &mut Graph, field: Var, target: &Tensor, mask: &Tensor, objective: DenseObjective) -> Result<Var> {
    let (b, _, h, w) = g.value(field).dims4("dense_error")?;
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::shape("dense_error", format!("mask {:?} for field {:?}", mask.shape(), g.shape(field))));
    }
    let count = mask.sum();
    if count <= 0.0 {
        return Err(Error::invalid("dense error over an empty mask"));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(field, t)?;
    let per_pixel = match objective {
        DenseObjective::Mae => {
            let a = g.abs(diff);
            g.sum_axis(a, 1)?
        }
        DenseObjective::Epe => {
            let sq = g.mul(diff, diff)?;
            let s = g.sum_axis(sq, 1)?;
            g.sqrt_eps(s, 1e-12)?
        }
    };
    let m = g.constant(mask.clone());
    let masked = g.mul(per_pixel, m)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / count))
}

/// Fraction of samples (rows) correct under every attack (columns).
pub fn worst_case_ensemble(flags: &[Vec<bool>]) -> Result<f64> {
    let cols = flags.first().map(Vec::len).ok_or_else(|| Error::invalid("no samples"))?;
    if cols == 0 {
        return Err(Error::invalid("no attacks"));
    }
    if let Some((i, row)) = flags.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::invalid(format!("ragged flag matrix: row {i} has {} of {cols} columns", row.len())));
    }
    let ok = flags.iter().filter(|r| r.iter().all(|&f| f)).count();
    Ok(ok as f64 / flags.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_fixture() {
        let f = vec![vec![true, true], vec![true, false], vec![false, true]];
        assert!((worst_case_ensemble(&f).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(worst_case_ensemble(&[vec![true], vec![true, false]]).is_err());
        assert!(worst_case_ensemble(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(0.1).validate().is_ok());
        assert!(AttackConfig { steps: 3, ..AttackConfig::fgsm(0.1) }.validate().is_err());
        assert!(AttackConfig::pgd(-0.1, 3).validate().is_err());
        assert!(AttackConfig::pgd(0.1, 0).validate().is_err());
        assert_eq!(AttackConfig::pgd(0.08, 20).step_size(), 2.5 * 0.08 / 20.0);
        assert_eq!(AttackConfig::pgd(0.08, 20).label(), "pgd20");
    }

    #[test]
    fn linear_objective_moves_by_epsilon() {
        // loss = sum(w * x) has gradient w everywhere.
        let w = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.0, 3.0]).unwrap();
        let obj = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
            let wv = g.constant(w.clone());
            let p = g.mul(xs[0], wv)?;
            Ok(g.sum(p))
        };
        let x = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.99]).unwrap();
        let adv = fgsm(&obj, &x, &AttackConfig::fgsm(0.1)).unwrap();
        assert_eq!(adv.x_adv.data(), &[0.6, 0.4, 0.5, 1.0]);
    }
}
