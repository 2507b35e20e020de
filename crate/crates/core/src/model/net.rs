use rayon::prelude::*;

use super::bundle::{TrainingMeta, WeightBundle};
use super::spec::{Layer, ModelSpec, TapPoint};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::seed;
use crate::tensor::Tensor;

/// Samples per forward pass in [`Model::predict`].
const EVAL_CHUNK: usize = 32;

/// A [`ModelSpec`] with concrete parameters. Immutable once built, so
/// concurrent forward passes can share it.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
    taps: Vec<TapPoint>,
    params: Vec<(String, Tensor)>,
    /// Index into `params` of each layer's first parameter.
    param_start: Vec<usize>,
}

fn param_layout(spec: &ModelSpec, shapes: &[Vec<usize>]) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = &shapes[i];
        match *layer {
            Layer::Conv {
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = input[0] * kernel * kernel;
                out.push((format!("layer{i}.weight"), vec![out_channels, input[0], kernel, kernel], fan_in));
                if bias {
                    out.push((format!("layer{i}.bias"), vec![out_channels], 0));
                }
            }
            Layer::Linear { out_features, bias } => {
                out.push((format!("layer{i}.weight"), vec![out_features, input[0]], input[0]));
                if bias {
                    out.push((format!("layer{i}.bias"), vec![out_features], 0));
                }
            }
            Layer::ResBlock { kernel, .. } => {
                let c = input[0];
                for conv in ["conv1", "conv2"] {
                    out.push((format!("layer{i}.{conv}.weight"), vec![c, c, kernel, kernel], c * kernel * kernel));
                    out.push((format!("layer{i}.{conv}.bias"), vec![c], 0));
                }
            }
            _ => {}
        }
    }
    out
}

fn param_count(layer: &Layer) -> usize {
    match *layer {
        Layer::Conv { bias, .. } | Layer::Linear { bias, .. } => 1 + usize::from(bias),
        Layer::ResBlock { .. } => 4,
        _ => 0,
    }
}

impl Model {
    fn assemble(spec: ModelSpec, params: Vec<(String, Tensor)>) -> Result<Self> {
        let shapes = spec.boundary_shapes()?;
        let taps = spec.tap_points()?;
        let mut param_start = Vec::with_capacity(spec.layers.len());
        let mut n = 0;
        for layer in &spec.layers {
            param_start.push(n);
            n += param_count(layer);
        }
        debug_assert_eq!(n, params.len());
        Ok(Self {
            spec,
            shapes,
            taps,
            params,
            param_start,
        })
    }

    /// He-normal weights and zero biases drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.boundary_shapes()?;
        let mut rng = seed::rng(seed);
        let params = param_layout(&spec, &shapes)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(shape)
                } else {
                    Tensor::rand_normal(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                };
                (name, t)
            })
            .collect();
        Self::assemble(spec, params)
    }

    /// Builds a model from stored parameters, which must match the `ModelSpec`'s
    /// names and shapes exactly.
    pub fn from_bundle(spec: ModelSpec, bundle: &WeightBundle) -> Result<Self> {
        let shapes = spec.boundary_shapes()?;
        let layout = param_layout(&spec, &shapes);
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, _) in &layout {
            let t = bundle.get(name).ok_or_else(|| Error::ParamShape {
                name: name.clone(),
                expected: shape.clone(),
                found: Vec::new(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            params.push((name.clone(), t.clone()));
        }
        if let Some((extra, t)) = bundle.params.iter().find(|(n, _)| !layout.iter().any(|(l, _, _)| l == n)) {
            return Err(Error::ParamShape {
                name: extra.clone(),
                expected: Vec::new(),
                found: t.shape().to_vec(),
            });
        }
        Self::assemble(spec, params)
    }

    pub fn to_bundle(&self, meta: TrainingMeta) -> WeightBundle {
        WeightBundle {
            params: self.params.clone(),
            meta,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub(crate) fn set_params(&mut self, values: Vec<Tensor>) {
        for ((_, slot), v) in self.params.iter_mut().zip(values) {
            *slot = v;
        }
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    /// Per-sample shape at boundary `k` (output of `layers[..k]`).
    pub fn boundary_shape(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Result<&TapPoint> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    /// Puts the parameters on `g`, differentiable iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn check_input(&self, shape: &[usize], boundary: usize) -> Result<()> {
        let want = &self.shapes[boundary];
        if shape.len() != want.len() + 1 || &shape[1..] != want.as_slice() {
            return Err(Error::shape(
                "model input",
                format!("boundary {boundary} expects [B, {want:?}], got {shape:?}"),
            ));
        }
        Ok(())
    }

    /// Applies `layers[from..to]` on the graph.
    pub fn forward_range(&self, g: &mut Graph, params: &[Var], x: Var, from: usize, to: usize) -> Result<Var> {
        if from > to || to > self.spec.layers.len() {
            return Err(Error::invalid(format!("layer range {from}..{to} of {}", self.spec.layers.len())));
        }
        self.check_input(g.shape(x), from)?;
        let mut h = x;
        for i in from..to {
            let p = &params[self.param_start[i]..];
            h = match self.spec.layers[i] {
                Layer::Conv {
                    stride,
                    padding,
                    pad_mode,
                    bias,
                    ..
                } => g.conv2d(h, p[0], bias.then(|| p[1]), stride, padding, pad_mode)?,
                Layer::Relu => g.relu(h),
                Layer::AvgPool { size } => g.avgpool2d(h, size)?,
                Layer::MaxPool { size } => g.maxpool2d(h, size)?,
                Layer::GlobalAvgPool => g.global_avgpool(h)?,
                Layer::Flatten => g.flatten(h)?,
                Layer::Linear { bias, .. } => g.linear(h, p[0], bias.then(|| p[1]))?,
                Layer::ResBlock { kernel, pad_mode } => {
                    let pad = kernel / 2;
                    let a = g.conv2d(h, p[0], Some(p[1]), 1, pad, pad_mode)?;
                    let a = g.relu(a);
                    let a = g.conv2d(a, p[2], Some(p[3]), 1, pad, pad_mode)?;
                    g.add(h, a)?
                }
            };
        }
        Ok(h)
    }

    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        self.forward_range(g, params, x, 0, self.num_layers())
    }

    fn eval_range(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_range(&mut g, &params, xv, from, to)?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_range(x, 0, self.num_layers())
    }

    pub fn forward_to_tap(&self, x: &Tensor, tap: &str) -> Result<Tensor> {
        let k = self.tap(tap)?.layer_index;
        self.eval_range(x, 0, k)
    }

    pub fn forward_from_tap(&self, features: &Tensor, tap: &str) -> Result<Tensor> {
        let k = self.tap(tap)?.layer_index;
        self.eval_range(features, k, self.num_layers())
    }

    /// Runs `f` over fixed-size batch chunks in parallel and concatenates
    /// the per-chunk outputs in order.
    pub fn map_chunks<F>(x: &Tensor, f: F) -> Result<Tensor>
    where
        F: Fn(&Tensor) -> Result<Tensor> + Sync,
    {
        let n = x.shape()[0];
        let parts = (0..n.div_ceil(EVAL_CHUNK))
            .into_par_iter()
            .map(|c| {
                let start = c * EVAL_CHUNK;
                f(&x.narrow_batch(start, EVAL_CHUNK.min(n - start))?)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat_batch(&parts)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Self::map_chunks(x, |c| self.forward(c))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        accuracy_of(&self.predict(x)?, labels)
    }
}

/// Fraction of `pred` equal to `labels`.
pub fn accuracy_of(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
