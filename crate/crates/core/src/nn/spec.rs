use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid-mode, stride-1 convolution followed by nothing; pair with
    /// [`LayerSpec::Relu`] explicitly.
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        filters: usize,
    },
    /// Non-overlapping max pooling (stride equals `size`).
    MaxPool2d {
        size: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Softmax,
    /// Inverted dropout with drop probability `rate` in `[0, 1)`.
    Dropout {
        rate: f32,
    },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

/// Activation shape of a single sample (the batch axis is implicit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { h, w, c } => vec![h, w, c],
            ActShape::Flat(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
}

impl NetworkSpec {
    /// Validates layer parameters and runs shape inference.
    pub fn new(layers: Vec<LayerSpec>, input_shape: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let spec = Self {
            layers,
            input_shape,
            num_classes,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Same architecture for a different input resolution.
    pub fn with_input_shape(&self, input_shape: (usize, usize, usize)) -> Result<Self> {
        Self::new(self.layers.clone(), input_shape, self.num_classes)
    }

    /// Same architecture with every dropout rate replaced by `rate`.
    pub fn with_dropout_rate(&self, rate: f32) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dropout { .. } => LayerSpec::Dropout { rate },
                other => *other,
            })
            .collect();
        Self::new(layers, self.input_shape, self.num_classes)
    }

    pub fn dropout_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dropout { .. }))
            .count()
    }

    /// Output shape of every layer, in order; the input shape is not included.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let mut shape = ActShape::Spatial { h, w, c };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = next_shape(i, layer, shape)?;
            out.push(shape);
        }
        match (self.layers.last(), out.last()) {
            (Some(LayerSpec::Softmax), Some(ActShape::Flat(n))) if *n == self.num_classes => {}
            _ => {
                return Err(Error::invalid(format!(
                    "final layer must be a softmax over {} classes",
                    self.num_classes
                )))
            }
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::Softmax))
        {
            return Err(Error::invalid("softmax is only allowed as the final layer"));
        }
        Ok(out)
    }

    /// Input shape of every layer, in order.
    pub(crate) fn layer_inputs(&self) -> Vec<ActShape> {
        let (h, w, c) = self.input_shape;
        let outs = self.infer_shapes().expect("spec validated at construction");
        let mut ins = Vec::with_capacity(outs.len());
        ins.push(ActShape::Spatial { h, w, c });
        ins.extend_from_slice(&outs[..outs.len() - 1]);
        ins
    }

    /// `(layer index, weight dims, bias dims)` for each parameterized layer.
    pub fn param_layout(&self) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
        self.layer_inputs()
            .into_iter()
            .zip(&self.layers)
            .enumerate()
            .filter_map(|(i, (input, layer))| match (*layer, input) {
                (
                    LayerSpec::Conv2d {
                        kernel_h,
                        kernel_w,
                        filters,
                    },
                    ActShape::Spatial { c, .. },
                ) => Some((i, vec![kernel_h, kernel_w, c, filters], vec![filters])),
                (LayerSpec::Dense { units }, ActShape::Flat(n)) => Some((i, vec![n, units], vec![units])),
                _ => None,
            })
            .collect()
    }
}

fn next_shape(index: usize, layer: &LayerSpec, shape: ActShape) -> Result<ActShape> {
    let bad = |msg: String| Error::invalid(format!("layer {index} ({layer:?}): {msg}"));
    match (*layer, shape) {
        (
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                filters,
            },
            ActShape::Spatial { h, w, .. },
        ) => {
            if kernel_h == 0 || kernel_w == 0 || filters == 0 {
                return Err(bad("kernel dims and filters must be >= 1".into()));
            }
            if kernel_h > h || kernel_w > w {
                return Err(bad(format!("kernel larger than {h}x{w} input")));
            }
            Ok(ActShape::Spatial {
                h: h - kernel_h + 1,
                w: w - kernel_w + 1,
                c: filters,
            })
        }
        (LayerSpec::MaxPool2d { size }, ActShape::Spatial { h, w, c }) => {
            if size == 0 {
                return Err(bad("pool size must be >= 1".into()));
            }
            if size > h || size > w {
                return Err(bad(format!("pool larger than {h}x{w} input")));
            }
            Ok(ActShape::Spatial {
                h: h / size,
                w: w / size,
                c,
            })
        }
        (LayerSpec::Dense { units }, ActShape::Flat(_)) => {
            if units == 0 {
                return Err(bad("units must be >= 1".into()));
            }
            Ok(ActShape::Flat(units))
        }
        (LayerSpec::Dropout { rate }, s) => {
            if !(0.0..1.0).contains(&rate) {
                return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
            }
            Ok(s)
        }
        (LayerSpec::Relu, s) => Ok(s),
        (LayerSpec::Softmax, s @ ActShape::Flat(_)) => Ok(s),
        (LayerSpec::Flatten, s) => Ok(ActShape::Flat(s.len())),
        (_, s) => Err(bad(format!("incompatible with input shape {s:?}"))),
    }
}

/// Dropout rates for the two kinds of dropout slot in the reference
/// architectures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    /// After the first pooling layer.
    pub conv: f32,
    /// After hidden dense layers.
    pub dense: f32,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self { conv: 0.25, dense: 0.5 }
    }
}

/// Eye-landmark regression network: three conv blocks, two 1024-unit dense
/// layers and a 10-way output.
pub fn build_landmark_net() -> NetworkSpec {
    build_landmark_net_with((32, 32, 1), DropoutRates::default()).expect("reference architecture is valid")
}

pub fn build_landmark_net_with(input_shape: (usize, usize, usize), rates: DropoutRates) -> Result<NetworkSpec> {
    use LayerSpec::*;
    NetworkSpec::new(
        vec![
            Conv2d {
                kernel_h: 3,
                kernel_w: 3,
                filters: 32,
            },
            Relu,
            MaxPool2d { size: 2 },
            Dropout { rate: rates.conv },
            Conv2d {
                kernel_h: 3,
                kernel_w: 3,
                filters: 64,
            },
            Relu,
            MaxPool2d { size: 2 },
            Conv2d {
                kernel_h: 2,
                kernel_w: 2,
                filters: 128,
            },
            Relu,
            Flatten,
            Dense { units: 1024 },
            Relu,
            Dropout { rate: rates.dense },
            Dense { units: 1024 },
            Relu,
            Dropout { rate: rates.dense },
            Dense { units: 10 },
            Softmax,
        ],
        input_shape,
        10,
    )
}

/// Open/closed eye classifier: two conv blocks, a 128-unit dense layer and
/// a 2-way output.
pub fn build_blink_net() -> NetworkSpec {
    build_blink_net_with((24, 24, 1), DropoutRates::default()).expect("reference architecture is valid")
}

pub fn build_blink_net_with(input_shape: (usize, usize, usize), rates: DropoutRates) -> Result<NetworkSpec> {
    use LayerSpec::*;
    NetworkSpec::new(
        vec![
            Conv2d {
                kernel_h: 3,
                kernel_w: 3,
                filters: 32,
            },
            Relu,
            MaxPool2d { size: 2 },
            Dropout { rate: rates.conv },
            Conv2d {
                kernel_h: 3,
                kernel_w: 3,
                filters: 64,
            },
            Relu,
            MaxPool2d { size: 2 },
            Flatten,
            Dense { units: 128 },
            Relu,
            Dropout { rate: rates.dense },
            Dense { units: 2 },
            Softmax,
        ],
        input_shape,
        2,
    )
}
