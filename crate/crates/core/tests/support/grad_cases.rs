//! Catalogue of differentiable graph expressions checked against central
//! finite differences. Shared by the gradient tests and the acceptance
//! runner.

use std::sync::Arc;

use rand::Rng;
use resonance::gradcheck::{finite_diff_gradient, max_rel_error};
use resonance::graph::{Graph, Var};
use resonance::group::{rotate_image, rotation_map, translate_image, translation_map, Interpolation};
use resonance::model::ModelSpec;
use resonance::seed;
use resonance::stereo::{patch_encoder, MatcherConfig, StereoMatcher};
use resonance::defense::ActionKind;
use resonance::{Defense, DefenseConfig, DefenseMode, Model, PadMode, Result, Shift, Tensor};

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl GradCase {
    fn new(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, xs: &[Tensor]) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        g.value(out).item()
    }

    /// Largest relative error over all inputs between the backward pass and
    /// central differences with step `h`.
    pub fn max_rel_error(&self, h: f64) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let mut worst = 0.0_f64;
        for (k, &v) in vars.iter().enumerate() {
            let fd = finite_diff_gradient(
                |t| {
                    let mut xs = self.inputs.clone();
                    xs[k] = t.clone();
                    self.eval(&xs)
                },
                &self.inputs[k],
                h,
            )?;
            worst = worst.max(max_rel_error(grads.wrt(v)?, &fd)?);
        }
        Ok(worst)
    }
}

/// Uniform values in `±[0.1, 1.1]`, away from the kinks of relu and abs.
fn away_from_zero(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.1);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = seed::rng(seed);
    let r = g.constant(uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn small_model(seed: u64) -> Arc<Model> {
    Arc::new(Model::new(ModelSpec::small_cnn([1, 8, 8], 3), seed).unwrap())
}

/// Smallest distance from a kink tolerated in the composed fixtures. A
/// finite-difference step of `h` moves a pre-activation by far less.
const KINK_MARGIN: f64 = 1e-4;

/// Whether any branch image of `x` (the translation grid of radius 1 and
/// the rotations used below) puts a conv pre-activation within
/// `KINK_MARGIN` of the relu kink, or two live cells of a pooling window
/// within `KINK_MARGIN` of each other. Central differences straddling a kink
/// measure a chord, not the gradient.
fn near_kink(model: &Model, x: &Tensor) -> bool {
    let mut images = vec![x.clone()];
    for i in -1..=1 {
        for j in -1..=1 {
            images.push(translate_image(x, Shift::new(i, j), PadMode::Zeros).unwrap());
        }
    }
    for deg in [-5.0, 5.0] {
        images.push(rotate_image(x, deg, Interpolation::Bilinear).unwrap());
    }
    images.iter().any(|img| {
        ["conv1", "conv2"].iter().any(|tap| {
            let pre = model.forward_to_tap(img, tap).unwrap();
            pre.data().iter().any(|v| v.abs() < KINK_MARGIN) || pool_near_tie(&pre.map(|v| v.max(0.0)))
        })
    })
}

fn pool_near_tie(t: &Tensor) -> bool {
    let (b, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    for n in 0..b * c {
        for y in (0..h - 1).step_by(2) {
            for x in (0..w - 1).step_by(2) {
                let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| t.data()[(n * h + y + dy) * w + x + dx])
                    .collect();
                win.sort_by(|a, b| b.total_cmp(a));
                if win[0] > 0.0 && win[0] - win[1] < KINK_MARGIN {
                    return true;
                }
            }
        }
    }
    false
}

/// All cases for one seed.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = seed::rng(seed);
    let rng = &mut rng;
    let p = seed ^ 0x5eed;
    let mut cases = Vec::new();
    let unary = |name, x: Tensor, f: fn(&mut Graph, Var) -> Result<Var>| {
        GradCase::new(name, vec![x], move |g, v| {
            let o = f(g, v[0])?;
            project(g, o, p)
        })
    };
    let binary = |name, a: Tensor, b: Tensor, f: fn(&mut Graph, Var, Var) -> Result<Var>| {
        GradCase::new(name, vec![a, b], move |g, v| {
            let o = f(g, v[0], v[1])?;
            project(g, o, p)
        })
    };
    let s = vec![2, 3, 4];
    cases.push(binary("add", uniform(s.clone(), -1.0, 1.0, rng), uniform(s.clone(), -1.0, 1.0, rng), |g, a, b| g.add(a, b)));
    cases.push(binary("sub", uniform(s.clone(), -1.0, 1.0, rng), uniform(s.clone(), -1.0, 1.0, rng), |g, a, b| g.sub(a, b)));
    cases.push(binary("mul", uniform(s.clone(), -1.0, 1.0, rng), uniform(s.clone(), -1.0, 1.0, rng), |g, a, b| g.mul(a, b)));
    cases.push(unary("scale", uniform(s.clone(), -1.0, 1.0, rng), |g, a| Ok(g.scale(a, -2.5))));
    cases.push(unary("abs", away_from_zero(s.clone(), rng), |g, a| Ok(g.abs(a))));
    cases.push(unary("sqrt_eps", uniform(s.clone(), 0.2, 2.0, rng), |g, a| g.sqrt_eps(a, 1e-12)));
    cases.push(unary("relu", away_from_zero(s.clone(), rng), |g, a| Ok(g.relu(a))));
    cases.push(unary("sum", uniform(s.clone(), -1.0, 1.0, rng), |g, a| Ok(g.sum(a))));
    cases.push(unary("mean", uniform(s.clone(), -1.0, 1.0, rng), |g, a| Ok(g.mean(a))));
    cases.push(unary("sum_axis", uniform(s.clone(), -1.0, 1.0, rng), |g, a| g.sum_axis(a, 1)));
    cases.push(unary("reshape", uniform(s.clone(), -1.0, 1.0, rng), |g, a| g.reshape(a, vec![4, 6])));
    cases.push(unary("flatten", uniform(s.clone(), -1.0, 1.0, rng), |g, a| g.flatten(a)));
    cases.push(unary("softmax", uniform(vec![3, 5], -2.0, 2.0, rng), |g, a| g.softmax(a, 1)));
    cases.push(unary("softmax_axis0", uniform(vec![4, 2, 3], -2.0, 2.0, rng), |g, a| g.softmax(a, 0)));

    let img = vec![2, 2, 6, 6];
    cases.push(GradCase::new(
        "conv2d_zeros_bias",
        vec![
            uniform(img.clone(), -1.0, 1.0, rng),
            uniform(vec![3, 2, 3, 3], -0.5, 0.5, rng),
            uniform(vec![3], -0.5, 0.5, rng),
        ],
        move |g, v| {
            let o = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, PadMode::Zeros)?;
            project(g, o, p)
        },
    ));
    cases.push(GradCase::new(
        "conv2d_circular_stride2",
        vec![uniform(img.clone(), -1.0, 1.0, rng), uniform(vec![3, 2, 3, 3], -0.5, 0.5, rng)],
        move |g, v| {
            let o = g.conv2d(v[0], v[1], None, 2, 1, PadMode::Circular)?;
            project(g, o, p)
        },
    ));
    cases.push(GradCase::new(
        "conv2d_k2_nopad",
        vec![uniform(img.clone(), -1.0, 1.0, rng), uniform(vec![2, 2, 2, 2], -0.5, 0.5, rng)],
        move |g, v| {
            let o = g.conv2d(v[0], v[1], None, 2, 0, PadMode::Zeros)?;
            project(g, o, p)
        },
    ));
    cases.push(unary("avgpool2d", uniform(img.clone(), -1.0, 1.0, rng), |g, a| g.avgpool2d(a, 2)));
    // Distinct values keep every pooling window away from ties.
    let n: usize = img.iter().product();
    let mut perm: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), rng);
    cases.push(unary("maxpool2d", Tensor::new(img.clone(), perm).unwrap(), |g, a| g.maxpool2d(a, 3)));
    cases.push(unary("global_avgpool", uniform(img.clone(), -1.0, 1.0, rng), |g, a| g.global_avgpool(a)));
    cases.push(GradCase::new(
        "linear",
        vec![
            uniform(vec![3, 5], -1.0, 1.0, rng),
            uniform(vec![4, 5], -1.0, 1.0, rng),
            uniform(vec![4], -1.0, 1.0, rng),
        ],
        move |g, v| {
            let o = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, o, p)
        },
    ));
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let l2 = labels.clone();
    cases.push(GradCase::new("cross_entropy", vec![uniform(vec![3, 4], -2.0, 2.0, rng)], move |g, v| {
        g.cross_entropy(v[0], &labels)
    }));
    cases.push(GradCase::new("margin_loss", vec![uniform(vec![3, 4], -2.0, 2.0, rng)], move |g, v| {
        g.margin_loss(v[0], &l2, 0.0)
    }));
    let tmap = Arc::new(translation_map(6, 6, Shift::new(1, -2), PadMode::Zeros).expect("translation map"));
    cases.push(GradCase::new("resample_translate", vec![uniform(img.clone(), -1.0, 1.0, rng)], move |g, v| {
        let o = g.resample(v[0], tmap.clone())?;
        project(g, o, p)
    }));
    let rmap = Arc::new(rotation_map(6, 6, 7.0, Interpolation::Bilinear));
    cases.push(GradCase::new("resample_rotate", vec![uniform(img.clone(), -1.0, 1.0, rng)], move |g, v| {
        let o = g.resample(v[0], rmap.clone())?;
        project(g, o, p)
    }));
    cases.push(GradCase::new(
        "weighted_sum",
        vec![uniform(s.clone(), -1.0, 1.0, rng), uniform(s.clone(), -1.0, 1.0, rng), uniform(s.clone(), -1.0, 1.0, rng)],
        move |g, v| {
            let o = g.weighted_sum(v, &[0.2, 0.5, 0.3])?;
            project(g, o, p)
        },
    ));
    cases.push(GradCase::new(
        "concat",
        vec![uniform(vec![2, 1, 3], -1.0, 1.0, rng), uniform(vec![2, 2, 3], -1.0, 1.0, rng)],
        move |g, v| {
            let o = g.concat(v, 1)?;
            project(g, o, p)
        },
    ));

    // Composed passes: the defended classifier in every ensemble mode and
    // the soft-argmin stereo matcher.
    let model = small_model(seed);
    let x = loop {
        let x = uniform(vec![1, 1, 8, 8], 0.0, 1.0, rng);
        if !near_kink(&model, &x) {
            break x;
        }
    };
    for (name, cfg) in [
        ("sr_forward", DefenseConfig::sr(1, "block1")),
        ("sr_forward_deep", DefenseConfig::sr(1, "block2")),
        ("latent_smooth", DefenseConfig::translate(DefenseMode::LatentSmooth, 1, "block1")),
        ("input_smooth", DefenseConfig::translate(DefenseMode::InputSmooth, 1, "block1")),
        ("output_ensemble", DefenseConfig::translate(DefenseMode::OutputEnsemble, 1, "block1")),
        (
            "sr_rotate",
            DefenseConfig {
                action: ActionKind::Rotate,
                ..DefenseConfig::sr(1, "block1")
            },
        ),
    ] {
        let m = model.clone();
        cases.push(GradCase::new(name, vec![x.clone()], move |g, v| {
            let d = Defense::new(&m, cfg.clone())?;
            let params = m.bind(g, false);
            let logits = d.forward_graph(g, &params, v[0])?;
            g.cross_entropy(logits, &[2])
        }));
    }
    let enc = Arc::new(patch_encoder([1, 6, 16], 3, 2, PadMode::Zeros).expect("patch encoder"));
    let pair = vec![uniform(vec![1, 1, 6, 16], 0.0, 1.0, rng), uniform(vec![1, 1, 6, 16], 0.0, 1.0, rng)];
    cases.push(GradCase::new("stereo_soft_argmin", pair, move |g, v| {
        let cfg = MatcherConfig {
            d_max: 3,
            temperature: 0.5,
            candidate_pad: PadMode::Zeros,
        };
        let m = StereoMatcher::new(&enc, "features", DefenseConfig::sr(1, "features"), cfg)?;
        let params = enc.bind(g, false);
        let d = m.disparity_graph(g, &params, v[0], v[1])?;
        project(g, d, p)
    }));
    cases
}
