use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::PadMode;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        pad_mode: PadMode,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// `x + conv2(relu(conv1(x)))`, both convs stride 1 with `kernel / 2`
    /// padding so the shape is preserved.
    ResBlock {
        kernel: usize,
        #[serde(default)]
        pad_mode: PadMode,
    },
}

impl Layer {
    /// Spatial downsampling factor of this layer.
    pub fn stride(&self) -> usize {
        match *self {
            Layer::Conv { stride, .. } => stride,
            Layer::AvgPool { size } | Layer::MaxPool { size } => size,
            _ => 1,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let spatial = || match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(format!("expects a [C, H, W] input, got {input:?}")),
        };
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (_, h, w) = spatial()?;
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("out_channels, kernel and stride must be positive".into());
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(format!("kernel {kernel} exceeds padded input {h}x{w} (padding {padding})"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::AvgPool { size } | Layer::MaxPool { size } => {
                let (c, h, w) = spatial()?;
                if size == 0 || h % size != 0 || w % size != 0 {
                    return Err(format!("pool size {size} does not divide {h}x{w}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            Layer::GlobalAvgPool => Ok(vec![spatial()?.0]),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear { out_features, .. } => match *input {
                [_] if out_features > 0 => Ok(vec![out_features]),
                [_] => Err("out_features must be positive".into()),
                _ => Err(format!("expects a flat input, got {input:?} (add flatten or global_avg_pool)")),
            },
            Layer::ResBlock { kernel, .. } => {
                let (_, h, w) = spatial()?;
                if kernel % 2 == 0 {
                    return Err(format!("resblock kernel must be odd, got {kernel}"));
                }
                if kernel > h + kernel / 2 * 2 || kernel > w + kernel / 2 * 2 {
                    return Err(format!("kernel {kernel} too large for {h}x{w}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// A named layer boundary. `layer_index = k` is the output of `layers[..k]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    pub layer_index: usize,
}

/// A validated tap with its cumulative spatial stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapPoint {
    pub name: String,
    pub layer_index: usize,
    pub cumulative_stride: usize,
    /// Per-sample feature shape at this boundary.
    pub shape: Vec<usize>,
}

impl TapPoint {
    pub fn is_spatial(&self) -> bool {
        self.shape.len() == 3
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]`.
    pub input_shape: Vec<usize>,
    /// `None` for feature encoders.
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub taps: Vec<TapSpec>,
}

impl ModelSpec {
    /// Per-sample shapes at every layer boundary (`layers.len() + 1` entries).
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::ModelSpec {
                index: 0,
                detail: format!("input_shape must be a positive [C, H, W], got {:?}", self.input_shape),
            });
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|detail| Error::ModelSpec {
                    index,
                    detail: format!("{layer:?}: {detail}"),
                })?;
            shapes.push(next);
        }
        if let Some(classes) = self.num_classes {
            let last = shapes.last().expect("non-empty");
            if last.as_slice() != [classes] {
                return Err(Error::ModelSpec {
                    index: self.layers.len().saturating_sub(1),
                    detail: format!("final output {last:?} does not match num_classes {classes}"),
                });
            }
        }
        Ok(shapes)
    }

    /// Validates every tap and computes its stride.
    pub fn tap_points(&self) -> Result<Vec<TapPoint>> {
        let shapes = self.boundary_shapes()?;
        let mut out: Vec<TapPoint> = Vec::with_capacity(self.taps.len());
        for t in &self.taps {
            if t.layer_index > self.layers.len() {
                return Err(Error::ModelSpec {
                    index: t.layer_index,
                    detail: format!("tap `{}` points past the last layer ({})", t.name, self.layers.len()),
                });
            }
            if out.iter().any(|o| o.name == t.name) {
                return Err(Error::ModelSpec {
                    index: t.layer_index,
                    detail: format!("duplicate tap name `{}`", t.name),
                });
            }
            out.push(TapPoint {
                name: t.name.clone(),
                layer_index: t.layer_index,
                cumulative_stride: self.layers[..t.layer_index].iter().map(Layer::stride).product(),
                shape: shapes[t.layer_index].clone(),
            });
        }
        Ok(out)
    }

    /// Flatten followed by a single linear layer.
    pub fn logistic(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            num_classes: Some(num_classes),
            layers: vec![
                Layer::Flatten,
                Layer::Linear {
                    out_features: num_classes,
                    bias: true,
                },
            ],
            taps: vec![TapSpec {
                name: "input".into(),
                layer_index: 0,
            }],
        }
    }

    /// Stride-1 circular convolutions followed by a dense head. Every tap up
    /// to `features` is exactly translation equivariant under circular shifts.
    pub fn equivariant_probe(input_shape: [usize; 3], channels: usize, num_classes: usize) -> Self {
        let conv = |out_channels| Layer::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pad_mode: PadMode::Circular,
            bias: true,
        };
        Self {
            input_shape: input_shape.to_vec(),
            num_classes: Some(num_classes),
            layers: vec![
                conv(channels),
                Layer::Relu,
                conv(channels),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear {
                    out_features: num_classes,
                    bias: true,
                },
            ],
            taps: [("conv1", 1), ("relu1", 2), ("conv2", 3), ("features", 4)]
                .into_iter()
                .map(|(name, layer_index)| TapSpec {
                    name: name.into(),
                    layer_index,
                })
                .collect(),
        }
    }

    /// Two conv/relu/max-pool stages and a linear head.
    pub fn small_cnn(input_shape: [usize; 3], num_classes: usize) -> Self {
        let conv = |out_channels| Layer::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pad_mode: PadMode::Zeros,
            bias: true,
        };
        Self {
            input_shape: input_shape.to_vec(),
            num_classes: Some(num_classes),
            layers: vec![
                conv(8),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                conv(16),
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::Flatten,
                Layer::Linear {
                    out_features: num_classes,
                    bias: true,
                },
            ],
            taps: [("conv1", 1), ("block1", 3), ("conv2", 4), ("block2", 6)]
                .into_iter()
                .map(|(name, layer_index)| TapSpec {
                    name: name.into(),
                    layer_index,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_compose() {
        let spec = ModelSpec::small_cnn([1, 32, 32], 4);
        let taps = spec.tap_points().unwrap();
        let strides: Vec<_> = taps.iter().map(|t| t.cumulative_stride).collect();
        assert_eq!(strides, vec![1, 2, 2, 4]);
        assert_eq!(taps[3].shape, vec![16, 8, 8]);
    }

    #[test]
    fn bad_layer_is_named() {
        let mut spec = ModelSpec::small_cnn([1, 32, 32], 4);
        spec.layers.insert(0, Layer::Linear { out_features: 3, bias: true });
        match spec.boundary_shapes() {
            Err(Error::ModelSpec { index: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut spec = ModelSpec::small_cnn([1, 30, 30], 4);
        spec.layers[5] = Layer::MaxPool { size: 4 };
        assert!(matches!(spec.boundary_shapes(), Err(Error::ModelSpec { index: 5, .. })));
    }

    #[test]
    fn class_count_checked() {
        let mut spec = ModelSpec::logistic([1, 4, 4], 3);
        spec.num_classes = Some(5);
        assert!(matches!(spec.boundary_shapes(), Err(Error::ModelSpec { .. })));
    }

    #[test]
    fn tap_past_end_rejected() {
        let mut spec = ModelSpec::logistic([1, 4, 4], 3);
        spec.taps.push(TapSpec {
            name: "late".into(),
            layer_index: 3,
        });
        assert!(spec.tap_points().is_err());
    }
}
