use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::rng::substream;

use super::kernels::{self, Batch, ParamGrad};
use super::{argmax, LayerSpec, ModelBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: ModelBundle,
    pub report: TrainReport,
}

/// Initializes a model from the `init` substream of `config.seed`, fits it
/// with minibatch SGD and reports accuracies.
pub fn train(
    extractor: &[LayerSpec],
    head: &[LayerSpec],
    classes: usize,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut init_rng = substream(config.seed, "init");
    let mut model = ModelBundle::initialized(
        train_set.geometry(),
        classes,
        extractor,
        head,
        &mut init_rng,
    )?;
    let epoch_losses = fit(&mut model, train_set, config)?;
    let steps = epoch_losses.len() * train_set.len().div_ceil(config.batch_size.max(1));
    let train_accuracy = evaluate_accuracy(&model, train_set)?;
    let test_accuracy = test_set
        .map(|t| evaluate_accuracy(&model, t))
        .transpose()?;
    Ok(TrainedModel {
        model,
        report: TrainReport {
            epoch_losses,
            steps,
            train_accuracy,
            test_accuracy,
        },
    })
}

/// Minibatch SGD with momentum on the mean negative log-likelihood.
/// Returns the mean training loss of each epoch.
pub fn fit(model: &mut ModelBundle, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidValue("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    model.input_geometry().check(&data.geometry())?;
    if let Some(&bad) = data.labels().iter().find(|&&l| l >= model.classes()) {
        return Err(Error::Bounds {
            what: "label",
            index: bad,
            len: model.classes(),
        });
    }

    let mut layers = model.all_layers();
    let mut velocity: Vec<ParamGrad> = layers
        .iter()
        .map(|l| ParamGrad {
            weights: vec![0.0; l.weights.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect();
    let mut grads = vec![ParamGrad::default(); layers.len()];
    let mut shuffle_rng = substream(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let geometry = data.geometry();
    let classes = model.classes();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = gather(data, chunk, geometry);
            let (out, trace) = kernels::forward(&layers, batch, true);
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut upstream = vec![0.0; chunk.len() * classes];
            for (row, &idx) in chunk.iter().enumerate() {
                let label = data.labels()[idx];
                loss -= out.data[row * classes + label];
                upstream[row * classes + label] = -scale;
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Training { step, loss });
            }
            total += loss * chunk.len() as f64;
            let trace = trace.expect("trace kept");
            kernels::backward(&layers, &trace, upstream, Some(&mut grads), false);
            for ((layer, v), g) in layers.iter_mut().zip(&mut velocity).zip(&grads) {
                if !layer.has_parameters() {
                    continue;
                }
                sgd_update(&mut layer.weights, &mut v.weights, &g.weights, config);
                sgd_update(&mut layer.bias, &mut v.bias, &g.bias, config);
                if layer.weights.iter().chain(&layer.bias).any(|p| !p.is_finite()) {
                    return Err(Error::Training { step, loss: f64::NAN });
                }
            }
            step += 1;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        losses.push(mean);
    }

    let (extractor, head) = layers.split_at(model.extractor().len());
    *model = ModelBundle::from_parts(
        model.input_geometry(),
        classes,
        extractor.to_vec(),
        head.to_vec(),
    );
    Ok(losses)
}

fn sgd_update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], config: &TrainConfig) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = config.momentum * *v + g;
        *p -= config.learning_rate * *v;
    }
}

fn gather(data: &Dataset, indices: &[usize], geometry: Geometry) -> Batch {
    let mut buf = Vec::with_capacity(indices.len() * geometry.len());
    for &i in indices {
        buf.extend_from_slice(data.pixels(i));
    }
    Batch::new(indices.len(), geometry, buf)
}

/// Fraction of `data` whose argmax prediction equals the label.
pub fn evaluate_accuracy(model: &ModelBundle, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidValue("evaluation set is empty".into()));
    }
    model.input_geometry().check(&data.geometry())?;
    let layers = model.all_layers();
    let classes = model.classes();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (out, _) = kernels::forward(&layers, gather(data, chunk, data.geometry()), false);
        for (row, &idx) in chunk.iter().enumerate() {
            if argmax(&out.data[row * classes..(row + 1) * classes]) == data.labels()[idx] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
