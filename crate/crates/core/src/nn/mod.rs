//! A small convolutional network runtime split into a spatial feature
//! extractor and a decision head.
//!
//! The extractor maps an image to a [`FeatureGrid`]; the head maps a grid to
//! class log-probabilities. Only the layer kinds in [`LayerSpec`] are
//! supported, which is enough for the reference digit classifier and for the
//! gradients the relaxed edit search needs.

mod format;
pub(crate) mod kernels;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::image::{Geometry, Image};

use kernels::Batch;

pub use format::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use train::{evaluate_accuracy, train, TrainConfig, TrainReport, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        outputs: usize,
    },
    LogSoftmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::LogSoftmax => "log-softmax",
        }
    }

    /// True for layers that keep a spatial layout (allowed in an extractor).
    pub fn is_spatial(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::Relu | LayerSpec::MaxPool2d { .. }
        )
    }

    pub fn output_geometry(&self, input: Geometry) -> Result<Geometry> {
        let invalid = |msg: String| Error::InvalidValue(format!("{}: {msg}", self.kind()));
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(invalid("parameters must be positive".into()));
                }
                if padding >= kernel {
                    return Err(invalid(format!(
                        "padding {padding} must be smaller than kernel {kernel}"
                    )));
                }
                let h = input.height + 2 * padding;
                let w = input.width + 2 * padding;
                if h < kernel || w < kernel {
                    return Err(invalid(format!(
                        "kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                Ok(Geometry::new(
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                    out_channels,
                ))
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(invalid("parameters must be positive".into()));
                }
                if input.height < window || input.width < window {
                    return Err(invalid(format!(
                        "window {window} larger than input {}x{}",
                        input.height, input.width
                    )));
                }
                Ok(Geometry::new(
                    (input.height - window) / stride + 1,
                    (input.width - window) / stride + 1,
                    input.channels,
                ))
            }
            LayerSpec::Relu | LayerSpec::LogSoftmax => Ok(input),
            LayerSpec::Flatten => Ok(Geometry::new(1, 1, input.len())),
            LayerSpec::Dense { outputs } => {
                if outputs == 0 {
                    return Err(invalid("output size must be positive".into()));
                }
                Ok(Geometry::new(1, 1, outputs))
            }
        }
    }

    /// `(weight count, bias count, fan-in)` for layers with parameters.
    fn parameter_shape(&self, input: Geometry) -> Option<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = kernel * kernel * input.channels;
                Some((fan_in * out_channels, out_channels, fan_in))
            }
            LayerSpec::Dense { outputs } => {
                let fan_in = input.len();
                Some((fan_in * outputs, outputs, fan_in))
            }
            _ => None,
        }
    }
}

/// A layer with its resolved geometry and parameters.
///
/// Convolution weights are laid out as a `(ky, kx, in_channel) × out_channel`
/// matrix; dense weights as `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Geometry,
    pub output: Geometry,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeroed(spec: LayerSpec, input: Geometry) -> Result<Self> {
        let output = spec.output_geometry(input)?;
        let (w, b) = spec
            .parameter_shape(input)
            .map(|(w, b, _)| (w, b))
            .unwrap_or((0, 0));
        Ok(Layer {
            spec,
            input,
            output,
            weights: vec![0.0; w],
            bias: vec![0.0; b],
        })
    }

    pub fn has_parameters(&self) -> bool {
        !self.weights.is_empty() || !self.bias.is_empty()
    }
}

fn set_parameters(
    layers: &mut [Layer],
    what: &'static str,
    index: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
) -> Result<()> {
    let len = layers.len();
    let layer = layers.get_mut(index).ok_or(Error::Bounds { what, index, len })?;
    for (dimension, expected, actual) in [
        ("weight count", layer.weights.len(), weights.len()),
        ("bias count", layer.bias.len(), bias.len()),
    ] {
        if expected != actual {
            return Err(Error::Shape { dimension, expected, actual });
        }
    }
    if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("parameters must be finite".into()));
    }
    layer.weights = weights;
    layer.bias = bias;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    input: Geometry,
    classes: usize,
    extractor: Vec<Layer>,
    head: Vec<Layer>,
}

/// Natural-log class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector(Vec<f64>);

impl LogProbVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; the first wins on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub(crate) fn from_vec(values: Vec<f64>) -> Self {
        LogProbVector(values)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scalar objective differentiated by [`ModelBundle::head_input_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `g_c(F)` for one class.
    ClassLogProb(usize),
    /// `Σ_c w_c · g_c(F)`; the weights act as the upstream gradient on the
    /// log-probability vector.
    Weighted(Vec<f64>),
}

/// Reference digit-classifier extractor: two 5×5 convolutions with ReLU and
/// 2×2 max pooling. A 28×28 input yields a 4×4×20 feature grid.
pub fn reference_extractor() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            out_channels: 10,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d {
            window: 2,
            stride: 2,
        },
        LayerSpec::Conv2d {
            out_channels: 20,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d {
            window: 2,
            stride: 2,
        },
    ]
}

/// Reference head: flatten, dense 50, ReLU, dense to the class count.
pub fn reference_head(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { outputs: 50 },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: classes },
        LayerSpec::LogSoftmax,
    ]
}

impl ModelBundle {
    /// Builds a model with all parameters zero.
    pub fn zeroed(
        input: Geometry,
        classes: usize,
        extractor: &[LayerSpec],
        head: &[LayerSpec],
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidValue("class count must be positive".into()));
        }
        if input.is_empty() {
            return Err(Error::InvalidValue("input geometry must be nonempty".into()));
        }
        if let Some(bad) = extractor.iter().find(|s| !s.is_spatial()) {
            return Err(Error::UnsupportedLayer {
                kind: bad.kind().into(),
                reason: "extractor layers must preserve the spatial layout".into(),
            });
        }
        if head.last() != Some(&LayerSpec::LogSoftmax) {
            return Err(Error::InvalidValue(
                "head must end with a log-softmax layer".into(),
            ));
        }
        let mut geometry = input;
        let mut build = |specs: &[LayerSpec]| -> Result<Vec<Layer>> {
            specs
                .iter()
                .map(|&spec| {
                    let layer = Layer::zeroed(spec, geometry)?;
                    geometry = layer.output;
                    Ok(layer)
                })
                .collect()
        };
        let extractor = build(extractor)?;
        let head = build(head)?;
        if geometry.len() != classes {
            return Err(Error::Shape {
                dimension: "head output",
                expected: classes,
                actual: geometry.len(),
            });
        }
        Ok(ModelBundle {
            input,
            classes,
            extractor,
            head,
        })
    }

    /// Builds a model with weights and biases drawn uniformly from
    /// `±1/√fan_in`.
    pub fn initialized<R: Rng>(
        input: Geometry,
        classes: usize,
        extractor: &[LayerSpec],
        head: &[LayerSpec],
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeroed(input, classes, extractor, head)?;
        for layer in model.layers_mut() {
            if let Some((_, _, fan_in)) = layer.spec.parameter_shape(layer.input) {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *w = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(model)
    }

    pub fn input_geometry(&self) -> Geometry {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn extractor(&self) -> &[Layer] {
        &self.extractor
    }

    pub fn head(&self) -> &[Layer] {
        &self.head
    }

    pub fn extractor_specs(&self) -> Vec<LayerSpec> {
        self.extractor.iter().map(|l| l.spec).collect()
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        self.head.iter().map(|l| l.spec).collect()
    }

    /// Geometry of `f(image)`: height × width cells of depth channels.
    pub fn feature_geometry(&self) -> Geometry {
        self.extractor.last().map(|l| l.output).unwrap_or(self.input)
    }

    /// Replaces the parameters of extractor layer `index`.
    pub fn set_extractor_parameters(&mut self, index: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        set_parameters(&mut self.extractor, "extractor layer", index, weights, bias)
    }

    /// Replaces the parameters of head layer `index`.
    pub fn set_head_parameters(&mut self, index: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        set_parameters(&mut self.head, "head layer", index, weights, bias)
    }

    pub(crate) fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.extractor.iter().chain(self.head.iter())
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.extractor.iter_mut().chain(self.head.iter_mut())
    }

    pub(crate) fn all_layers(&self) -> Vec<Layer> {
        self.layers().cloned().collect()
    }

    pub(crate) fn from_parts(
        input: Geometry,
        classes: usize,
        extractor: Vec<Layer>,
        head: Vec<Layer>,
    ) -> Self {
        ModelBundle {
            input,
            classes,
            extractor,
            head,
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        self.input.check(&image.geometry())
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        let g = self.feature_geometry();
        for (dimension, expected, actual) in [
            ("feature height", g.height, grid.height()),
            ("feature width", g.width, grid.width()),
            ("feature depth", g.channels, grid.depth()),
        ] {
            if expected != actual {
                return Err(Error::Shape {
                    dimension,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// `f(image)`.
    pub fn forward_features(&self, image: &Image) -> Result<FeatureGrid> {
        self.check_image(image)?;
        let batch = Batch::new(1, self.input, image.pixels().to_vec());
        let (out, _) = kernels::forward(&self.extractor, batch, false);
        let g = out.geometry;
        FeatureGrid::new(g.height, g.width, g.channels, out.data)
    }

    /// `g(F)`.
    pub fn head_logprobs(&self, grid: &FeatureGrid) -> Result<LogProbVector> {
        self.check_grid(grid)?;
        let batch = Batch::new(1, self.feature_geometry(), grid.values().to_vec());
        let (out, _) = kernels::forward(&self.head, batch, false);
        Ok(LogProbVector(out.data))
    }

    /// Evaluates the head on `count` grids stored back to back. Each row of
    /// the result equals what [`head_logprobs`](Self::head_logprobs) returns
    /// for the same grid.
    pub(crate) fn head_logprobs_flat(&self, grids: Vec<f64>, count: usize) -> Vec<f64> {
        let batch = Batch::new(count, self.feature_geometry(), grids);
        kernels::forward(&self.head, batch, false).0.data
    }

    /// `g(f(image))`.
    pub fn logprobs(&self, image: &Image) -> Result<LogProbVector> {
        self.head_logprobs(&self.forward_features(image)?)
    }

    /// Runs the whole layer stack in one pass, without the grid split.
    pub fn logprobs_end_to_end(&self, image: &Image) -> Result<LogProbVector> {
        self.check_image(image)?;
        let batch = Batch::new(1, self.input, image.pixels().to_vec());
        let layers = self.all_layers();
        let (out, _) = kernels::forward(&layers, batch, false);
        Ok(LogProbVector(out.data))
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(self.logprobs(image)?.argmax())
    }

    /// Value and gradient of `objective(g(F))` with respect to `F`.
    pub fn head_input_gradient(
        &self,
        grid: &FeatureGrid,
        objective: &Objective,
    ) -> Result<(f64, FeatureGrid)> {
        self.check_grid(grid)?;
        let upstream = match objective {
            Objective::ClassLogProb(c) => {
                if *c >= self.classes {
                    return Err(Error::Bounds {
                        what: "class",
                        index: *c,
                        len: self.classes,
                    });
                }
                let mut u = vec![0.0; self.classes];
                u[*c] = 1.0;
                u
            }
            Objective::Weighted(w) => {
                if w.len() != self.classes {
                    return Err(Error::Shape {
                        dimension: "objective weights",
                        expected: self.classes,
                        actual: w.len(),
                    });
                }
                w.clone()
            }
        };
        let geometry = self.feature_geometry();
        let batch = Batch::new(1, geometry, grid.values().to_vec());
        let (out, trace) = kernels::forward(&self.head, batch, true);
        let value = out.data.iter().zip(&upstream).map(|(l, u)| l * u).sum();
        let trace = trace.expect("trace kept");
        let grad = kernels::backward(&self.head, &trace, upstream, None, true);
        Ok((
            value,
            FeatureGrid::new(geometry.height, geometry.width, geometry.channels, grad)?,
        ))
    }
}
