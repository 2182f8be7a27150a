//! Run configuration and the batch pipeline: pair sampling, parallel
//! explanation with a single ordered writer, and metric evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    agreement_cross_class, agreement_same_class, avg_edit_count, default_keypoint_radius, nearest_by_keypoints,
    nearest_distractor_class, random_distractor_class, region_annotation_hit_rate, relaxation_fidelity,
    AgreementSample, AnnotationSet, AttributeTable, FidelityInstance, MetricReport,
};
use crate::explain::{
    render_explanation, write_explanation, ExplanationRecord, HighlightMode, ReceptiveFieldMap, WrittenExplanation,
};
use crate::nn::{load_model, ModelBundle, TrainConfig};
use crate::rng::substream;
use crate::search::{greedy_counterfactual, CandidateFilter, ExplanationResult, SearchConfig, Strategy};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassPolicy {
    Random,
    /// Nearest class by attribute vector; needs an attribute table.
    NearestAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImagePolicy {
    Random,
    /// Nearest image by keypoint layout; needs annotations.
    NearestKeypoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub count: usize,
    pub class_policy: ClassPolicy,
    pub image_policy: ImagePolicy,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            count: 100,
            class_policy: ClassPolicy::Random,
            image_policy: ImagePolicy::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub enabled: bool,
    pub mode: HighlightMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            enabled: true,
            mode: HighlightMode::HardBox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub agreement_queries: usize,
    pub distractors_per_query: usize,
    pub fidelity_instances: usize,
    /// Pixel radius for keypoint hits; defaults to half the field stride.
    pub keypoint_radius: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            agreement_queries: 20,
            distractors_per_query: 5,
            fidelity_instances: 100,
            keypoint_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub output: PathBuf,
    pub data: DataConfig,
    pub pairs: PairConfig,
    pub search: SearchConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: RUN_CONFIG_VERSION,
            seed: 0,
            model: None,
            output: PathBuf::from("out"),
            data: DataConfig::default(),
            pairs: PairConfig::default(),
            search: SearchConfig::default(),
            render: RenderConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if config.version != RUN_CONFIG_VERSION {
            return Err(Error::Version {
                found: config.version,
                supported: RUN_CONFIG_VERSION,
            });
        }
        config.search.relaxed.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Model path, or a configuration error naming what is missing.
    pub fn model_path(&self) -> Result<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| Error::Config("no model path given".into()))
    }

    /// Loads `data.images` / `data.labels`.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.images, &self.data.labels) {
            (Some(i), Some(l)) => load_idx(i, l),
            _ => Err(Error::Config("dataset needs both `images` and `labels`".into())),
        }
    }

    fn annotations(&self) -> Result<Option<AnnotationSet>> {
        self.data.annotations.as_ref().map(AnnotationSet::load).transpose()
    }

    fn attributes(&self) -> Result<Option<AttributeTable>> {
        self.data.attributes.as_ref().map(AttributeTable::load).transpose()
    }
}

/// Identifier of dataset image `index` in records and annotation files.
pub fn image_id(index: usize) -> String {
    format!("{index:05}")
}

pub fn parse_image_id(id: &str) -> Result<usize> {
    id.parse()
        .map_err(|_| Error::format("image id", format!("`{id}` is not a dataset index")))
}

/// Predicted class of every image, in dataset order.
pub fn predict_all(model: &ModelBundle, data: &Dataset) -> Result<Vec<usize>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| model.predict(&data.image(i)))
        .collect()
}

fn class_pools(predictions: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &p) in predictions.iter().enumerate() {
        pools[p].push(i);
    }
    pools
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub query: usize,
    pub distractor: usize,
    pub target: usize,
}

/// Samples query/distractor pairs from the `pairs` substream. The distractor
/// is an image predicted as the target class.
pub fn sample_pairs(
    predictions: &[usize],
    classes: usize,
    config: &PairConfig,
    annotations: Option<&AnnotationSet>,
    attributes: Option<&AttributeTable>,
    seed: u64,
) -> Result<Vec<Pair>> {
    if predictions.is_empty() {
        return Err(Error::InvalidValue("cannot sample pairs from an empty dataset".into()));
    }
    let pools = class_pools(predictions, classes);
    if pools.iter().filter(|p| !p.is_empty()).count() < 2 {
        return Err(Error::InvalidValue("pair sampling needs images predicted as at least 2 classes".into()));
    }
    if config.class_policy == ClassPolicy::NearestAttribute && attributes.is_none() {
        return Err(Error::Config("class policy `nearest-attribute` needs an attribute table".into()));
    }
    if config.image_policy == ImagePolicy::NearestKeypoints && annotations.is_none() {
        return Err(Error::Config("image policy `nearest-keypoints` needs annotations".into()));
    }
    let mut rng = substream(seed, "pairs");
    let mut pairs = Vec::with_capacity(config.count);
    while pairs.len() < config.count {
        let query = rng.gen_range(0..predictions.len());
        let class = predictions[query];
        let target = match (config.class_policy, attributes) {
            (ClassPolicy::NearestAttribute, Some(table)) => nearest_distractor_class(class, table)?,
            _ => random_distractor_class(class, classes, &mut rng)?,
        };
        let pool = &pools[target];
        if pool.is_empty() {
            continue;
        }
        let distractor = match (config.image_policy, annotations) {
            (ImagePolicy::NearestKeypoints, Some(ann)) => {
                let kps = |i: usize| ann.images.get(&image_id(i)).map(|a| a.keypoints.clone());
                let candidates: Vec<(String, _)> = pool
                    .iter()
                    .filter_map(|&i| kps(i).map(|k| (image_id(i), k)))
                    .collect();
                match kps(query).and_then(|q| nearest_by_keypoints(&q, &candidates)) {
                    Some(id) => parse_image_id(&id)?,
                    None => pool[rng.gen_range(0..pool.len())],
                }
            }
            _ => pool[rng.gen_range(0..pool.len())],
        };
        pairs.push(Pair {
            query,
            distractor,
            target,
        });
    }
    Ok(pairs)
}

/// Runs the greedy search for one pair and tags the result with image ids.
pub fn explain_pair(model: &ModelBundle, data: &Dataset, pair: Pair, search: &SearchConfig) -> Result<ExplanationResult> {
    let mut result = greedy_counterfactual(
        model,
        &data.image(pair.query),
        &data.image(pair.distractor),
        pair.target,
        search,
    )?;
    result.query_id = Some(image_id(pair.query));
    result.distractor_id = Some(image_id(pair.distractor));
    Ok(result)
}

/// File stem of the `k`-th pair's outputs.
pub fn pair_stem(k: usize) -> String {
    format!("pair-{k:05}")
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub results: Vec<ExplanationResult>,
    pub files: Vec<WrittenExplanation>,
}

/// Explains all pairs in parallel; one collector then writes records (and
/// rasters when `render` is given) to `dir` in pair order.
pub fn batch_explain(
    model: &ModelBundle,
    data: &Dataset,
    pairs: &[Pair],
    search: &SearchConfig,
    render: Option<HighlightMode>,
    dir: &Path,
) -> Result<BatchOutput> {
    let rf = ReceptiveFieldMap::for_model(model)?;
    let computed: Vec<Result<_>> = pairs
        .par_iter()
        .map(|&pair| {
            let result = explain_pair(model, data, pair, search)?;
            let record = ExplanationRecord::new(&result, &rf, search)?;
            let rendered = render
                .map(|mode| render_explanation(&result, &data.image(pair.query), &data.image(pair.distractor), &rf, mode))
                .transpose()?;
            Ok((result, record, rendered))
        })
        .collect();
    let mut out = BatchOutput {
        results: Vec::with_capacity(pairs.len()),
        files: Vec::with_capacity(pairs.len()),
    };
    for (k, c) in computed.into_iter().enumerate() {
        let (result, record, rendered) = c?;
        out.files.push(write_explanation(&record, rendered.as_ref(), dir, &pair_stem(k))?);
        out.results.push(result);
    }
    Ok(out)
}

/// Builds same-class and cross-class agreement samples from the `agreement`
/// substream. Same-class samples draw `per_query` distinct images of one
/// random other class; cross-class samples draw one image from each of up to
/// `per_query` distinct other classes.
pub fn agreement_samples(
    model: &ModelBundle,
    data: &Dataset,
    predictions: &[usize],
    queries: usize,
    per_query: usize,
    seed: u64,
) -> Result<(Vec<AgreementSample>, Vec<AgreementSample>)> {
    let pools = class_pools(predictions, model.classes());
    let mut rng = substream(seed, "agreement");
    let mut plans = Vec::with_capacity(queries);
    let mut attempts = 0;
    while plans.len() < queries {
        attempts += 1;
        if attempts > 100 * queries.max(1) {
            return Err(Error::InvalidValue(
                "not enough images per predicted class for agreement sampling".into(),
            ));
        }
        let query = rng.gen_range(0..predictions.len());
        let class = predictions[query];
        let others: Vec<usize> = (0..model.classes())
            .filter(|&c| c != class && !pools[c].is_empty())
            .collect();
        let same_classes: Vec<usize> = others.iter().copied().filter(|&c| pools[c].len() >= per_query).collect();
        let Some(&same_class) = same_classes.choose(&mut rng) else {
            continue;
        };
        let same: Vec<(usize, usize)> = pools[same_class]
            .choose_multiple(&mut rng, per_query)
            .map(|&i| (i, same_class))
            .collect();
        let cross: Vec<(usize, usize)> = others
            .choose_multiple(&mut rng, per_query.min(others.len()))
            .map(|&c| (pools[c][rng.gen_range(0..pools[c].len())], c))
            .collect();
        plans.push((query, same, cross));
    }
    let build = |query: usize, ds: &[(usize, usize)]| -> Result<AgreementSample> {
        Ok(AgreementSample {
            id: image_id(query),
            query: model.forward_features(&data.image(query))?,
            distractors: ds
                .iter()
                .map(|&(i, c)| Ok((model.forward_features(&data.image(i))?, c)))
                .collect::<Result<_>>()?,
        })
    };
    let built: Vec<Result<(AgreementSample, AgreementSample)>> = plans
        .par_iter()
        .map(|(q, same, cross)| Ok((build(*q, same)?, build(*q, cross)?)))
        .collect();
    let mut same = Vec::with_capacity(queries);
    let mut cross = Vec::with_capacity(queries);
    for b in built {
        let (s, c) = b?;
        same.push(s);
        cross.push(c);
    }
    Ok((same, cross))
}

/// First-step best-edit problems for the given pairs.
pub fn fidelity_instances(model: &ModelBundle, data: &Dataset, pairs: &[Pair]) -> Result<Vec<FidelityInstance>> {
    pairs
        .par_iter()
        .map(|p| {
            let query = model.forward_features(&data.image(p.query))?;
            let distractor = model.forward_features(&data.image(p.distractor))?;
            let filter = CandidateFilter::all(query.cells());
            Ok(FidelityInstance {
                id: format!("{}/{}", image_id(p.query), image_id(p.distractor)),
                query,
                distractor,
                target: p.target,
                filter,
            })
        })
        .collect()
}

/// Writes each report to `<dir>/<metric>.json`.
pub fn write_reports(reports: &[MetricReport], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    reports
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.json", r.metric));
            fs::write(&path, r.to_json()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Metric reports for a finished batch: edit counts, agreement, fidelity and,
/// when annotations are configured, region hit rates.
pub fn evaluate(
    model: &ModelBundle,
    data: &Dataset,
    predictions: &[usize],
    pairs: &[Pair],
    results: &[ExplanationResult],
    config: &RunConfig,
) -> Result<Vec<MetricReport>> {
    let mut reports = vec![avg_edit_count(results)?];
    if config.eval.agreement_queries > 0 {
        let (same, cross) = agreement_samples(
            model,
            data,
            predictions,
            config.eval.agreement_queries,
            config.eval.distractors_per_query,
            config.seed,
        )?;
        reports.push(agreement_same_class(model, &same)?);
        match agreement_cross_class(model, &cross) {
            Ok(r) => reports.push(r),
            Err(e) => log::warn!("cross-class agreement skipped: {e}"),
        }
    }
    let n = config.eval.fidelity_instances.min(pairs.len());
    if n > 0 {
        let instances = fidelity_instances(model, data, &pairs[..n])?;
        reports.push(relaxation_fidelity(model, &instances, Strategy::Relaxed, &config.search.relaxed)?);
    }
    if let Some(ann) = config.annotations()? {
        let rf = ReceptiveFieldMap::for_model(model)?;
        let radius = config.eval.keypoint_radius.unwrap_or_else(|| default_keypoint_radius(&rf));
        reports.extend(region_annotation_hit_rate(results, &ann, &rf, radius)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<WrittenExplanation>,
    pub reports: Vec<PathBuf>,
    pub metrics: Vec<MetricReport>,
}

/// Full batch run: sample pairs, explain, evaluate. Writes
/// `run-config.toml`, `records/` and `reports/` under `config.output`.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    let model = load_model(config.model_path()?)?;
    let data = config.dataset()?;
    let annotations = config.annotations()?;
    let attributes = config.attributes()?;
    let predictions = predict_all(&model, &data)?;
    let pairs = sample_pairs(
        &predictions,
        model.classes(),
        &config.pairs,
        annotations.as_ref(),
        attributes.as_ref(),
        config.seed,
    )?;
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join("run-config.toml");
    fs::write(&echo, config.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let render = config.render.enabled.then_some(config.render.mode);
    let batch = batch_explain(&model, &data, &pairs, &config.search, render, &out.join("records"))?;
    let metrics = evaluate(&model, &data, &predictions, &pairs, &batch.results, config)?;
    let reports = write_reports(&metrics, &out.join("reports"))?;
    Ok(RunSummary {
        records: batch.files,
        reports,
        metrics,
    })
}
