//! Quantitative evaluation: edit counts, distractor agreement, relaxation
//! fidelity and annotation hit rates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{read_pnm, ReceptiveFieldMap, Rect};
use crate::features::{Cell, FeatureGrid};
use crate::nn::ModelBundle;
use crate::relaxed::{best_edit_relaxed, RelaxOptConfig};
use crate::search::{best_edit_exhaustive, CandidateFilter, ExplanationResult, Status, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Headline value; `None` when no sample qualified.
    pub value: Option<f64>,
    pub samples: usize,
    /// Secondary statistics keyed by name.
    pub details: BTreeMap<String, f64>,
    pub records: Vec<SampleRecord>,
    pub notes: Vec<String>,
}

impl MetricReport {
    fn new(metric: &str) -> Self {
        MetricReport {
            metric: metric.into(),
            value: None,
            samples: 0,
            details: BTreeMap::new(),
            records: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn result_id(r: &ExplanationResult, index: usize) -> String {
    match (&r.query_id, &r.distractor_id) {
        (Some(q), Some(d)) => format!("{q}/{d}"),
        (Some(q), None) => q.clone(),
        _ => format!("#{index}"),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean, median and histogram of edit counts over flipped results, plus the
/// flip rate. Exhausted results only enter the flip rate.
pub fn avg_edit_count(results: &[ExplanationResult]) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::InvalidValue("edit-count report needs at least one result".into()));
    }
    let mut report = MetricReport::new("avg-edit-count");
    report.samples = results.len();
    let mut counts = Vec::new();
    for (k, r) in results.iter().enumerate() {
        report.records.push(SampleRecord {
            id: result_id(r, k),
            value: r.edits.len() as f64,
        });
        if r.status == Status::Flipped {
            counts.push(r.edits.len());
        }
    }
    let flipped = counts.len();
    report.details.insert("flipped".into(), flipped as f64);
    report.details.insert("exhausted".into(), (results.len() - flipped) as f64);
    report.details.insert("flip_rate".into(), flipped as f64 / results.len() as f64);
    if counts.is_empty() {
        report.notes.push("no result flipped; mean undefined".into());
        return Ok(report);
    }
    counts.sort_unstable();
    let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    report.value = Some(mean(&as_f64));
    let mid = counts.len() / 2;
    let median = if counts.len() % 2 == 1 {
        as_f64[mid]
    } else {
        (as_f64[mid - 1] + as_f64[mid]) / 2.0
    };
    report.details.insert("median".into(), median);
    for c in &counts {
        *report.details.entry(format!("histogram.{c:03}")).or_insert(0.0) += 1.0;
    }
    Ok(report)
}

/// One query with the distractors it is explained against; each distractor
/// carries the target class it stands for.
#[derive(Debug, Clone)]
pub struct AgreementSample {
    pub id: String,
    pub query: FeatureGrid,
    pub distractors: Vec<(FeatureGrid, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairKind {
    SameClass,
    CrossClass,
}

/// Fraction of same-class distractor pairs whose best edit picks the same
/// query cell.
pub fn agreement_same_class(model: &ModelBundle, samples: &[AgreementSample]) -> Result<MetricReport> {
    agreement(model, samples, PairKind::SameClass)
}

/// As [`agreement_same_class`] over pairs of distractors from different
/// classes.
pub fn agreement_cross_class(model: &ModelBundle, samples: &[AgreementSample]) -> Result<MetricReport> {
    agreement(model, samples, PairKind::CrossClass)
}

fn agreement(model: &ModelBundle, samples: &[AgreementSample], kind: PairKind) -> Result<MetricReport> {
    let name = match kind {
        PairKind::SameClass => "agreement-same-class",
        PairKind::CrossClass => "agreement-cross-class",
    };
    let per_sample: Vec<Result<Option<(usize, usize)>>> = samples
        .par_iter()
        .map(|s| {
            let classes: std::collections::BTreeSet<usize> = s.distractors.iter().map(|d| d.1).collect();
            match kind {
                PairKind::SameClass if classes.len() > 1 => {
                    return Err(Error::InvalidValue(format!(
                        "sample `{}` mixes distractor classes in a same-class agreement",
                        s.id
                    )))
                }
                PairKind::CrossClass if classes.len() < 2 => return Ok(None),
                _ => {}
            }
            if s.distractors.len() < 2 {
                return Ok(None);
            }
            let filter = CandidateFilter::all(s.query.cells());
            let cells = s
                .distractors
                .iter()
                .map(|(d, c)| Ok(best_edit_exhaustive(model, &s.query, d, *c, &filter)?.query_cell))
                .collect::<Result<Vec<_>>>()?;
            let (mut agree, mut total) = (0, 0);
            for a in 0..cells.len() {
                for b in a + 1..cells.len() {
                    let same = s.distractors[a].1 == s.distractors[b].1;
                    if same != (kind == PairKind::SameClass) {
                        continue;
                    }
                    total += 1;
                    agree += usize::from(cells[a] == cells[b]);
                }
            }
            Ok(Some((agree, total)))
        })
        .collect();

    let mut report = MetricReport::new(name);
    let (mut agree, mut total) = (0, 0);
    for (s, r) in samples.iter().zip(per_sample) {
        match r? {
            Some((a, t)) if t > 0 => {
                agree += a;
                total += t;
                report.samples += 1;
                report.records.push(SampleRecord {
                    id: s.id.clone(),
                    value: a as f64 / t as f64,
                });
            }
            _ => report.notes.push(format!("skipped `{}`: fewer than 2 usable distractors", s.id)),
        }
    }
    if total == 0 {
        return Err(Error::InvalidValue(match kind {
            PairKind::SameClass => "same-class agreement needs a query with at least 2 distractors".into(),
            PairKind::CrossClass => "cross-class agreement needs at least 2 distractor classes".into(),
        }));
    }
    report.value = Some(agree as f64 / total as f64);
    report.details.insert("pairs".into(), total as f64);
    report.details.insert("agreeing_pairs".into(), agree as f64);
    Ok(report)
}

/// One best-edit problem.
#[derive(Debug, Clone)]
pub struct FidelityInstance {
    pub id: String,
    pub query: FeatureGrid,
    pub distractor: FeatureGrid,
    pub target: usize,
    pub filter: CandidateFilter,
}

/// Compares `candidate` (normally the relaxed solver) against exhaustive
/// search: exact-match rate of `(i, j')` and mean ratio of the discrete
/// target probabilities.
pub fn relaxation_fidelity(
    model: &ModelBundle,
    instances: &[FidelityInstance],
    candidate: Strategy,
    opt: &RelaxOptConfig,
) -> Result<MetricReport> {
    if instances.is_empty() {
        return Err(Error::InvalidValue("fidelity needs at least one instance".into()));
    }
    let outcomes: Vec<Result<(bool, f64)>> = instances
        .par_iter()
        .map(|inst| {
            let exact = best_edit_exhaustive(model, &inst.query, &inst.distractor, inst.target, &inst.filter)?;
            let other = match candidate {
                Strategy::Exhaustive => exact,
                Strategy::Relaxed => {
                    best_edit_relaxed(model, &inst.query, &inst.distractor, inst.target, &inst.filter, opt)?.best
                }
            };
            let matched = (exact.query_cell, exact.distractor_cell) == (other.query_cell, other.distractor_cell);
            Ok((matched, (other.score - exact.score).exp()))
        })
        .collect();
    let mut report = MetricReport::new("relaxation-fidelity");
    let (mut matches, mut ratios) = (0usize, Vec::with_capacity(instances.len()));
    for (inst, o) in instances.iter().zip(outcomes) {
        let (m, ratio) = o?;
        matches += usize::from(m);
        ratios.push(ratio);
        report.records.push(SampleRecord {
            id: inst.id.clone(),
            value: ratio,
        });
    }
    report.samples = instances.len();
    let rate = matches as f64 / instances.len() as f64;
    report.value = Some(rate);
    report.details.insert("match_rate".into(), rate);
    report.details.insert("mean_probability_ratio".into(), mean(&ratios));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Binary segmentation mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y < self.height && x < self.width && self.inside[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub mask: Option<Mask>,
    pub keypoints: Vec<Keypoint>,
}

/// Annotations keyed by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub images: BTreeMap<String, Annotation>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    version: u32,
    images: BTreeMap<String, AnnotationEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationEntry {
    #[serde(default)]
    mask: Option<String>,
    #[serde(default)]
    keypoints: Vec<Keypoint>,
}

pub const ANNOTATION_FORMAT_VERSION: u32 = 1;

impl AnnotationSet {
    /// Reads a JSON annotation file; mask paths are PGM files relative to
    /// the annotation file, nonzero pixels count as inside.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AnnotationFile =
            serde_json::from_str(&text).map_err(|e| Error::format("annotations", e.to_string()))?;
        if file.version != ANNOTATION_FORMAT_VERSION {
            return Err(Error::Version {
                found: file.version,
                supported: ANNOTATION_FORMAT_VERSION,
            });
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut images = BTreeMap::new();
        for (id, entry) in file.images {
            let mask = entry
                .mask
                .map(|m| -> Result<Mask> {
                    let img = read_pnm(base.join(m))?;
                    if img.channels() != 1 {
                        return Err(Error::format(format!("images.{id}.mask"), "mask must be a graymap"));
                    }
                    Ok(Mask {
                        height: img.height(),
                        width: img.width(),
                        inside: img.pixels().iter().map(|&v| v > 0.0).collect(),
                    })
                })
                .transpose()?;
            for kp in &entry.keypoints {
                if let Some(m) = &mask {
                    let out = kp.x < 0.0 || kp.y < 0.0 || kp.x >= m.width as f64 || kp.y >= m.height as f64;
                    if kp.visible && out {
                        return Err(Error::format(
                            format!("images.{id}.keypoints"),
                            format!("visible keypoint `{}` lies outside the image", kp.name),
                        ));
                    }
                }
            }
            images.insert(
                id,
                Annotation {
                    mask,
                    keypoints: entry.keypoints,
                },
            );
        }
        Ok(AnnotationSet { images })
    }
}

/// Default keypoint radius: half the receptive-field stride.
pub fn default_keypoint_radius(rf: &ReceptiveFieldMap) -> f64 {
    rf.stride() as f64 / 2.0
}

fn rect_center(rect: &Rect) -> (f64, f64) {
    rect.center()
}

fn nearest_keypoint<'a>(kps: &'a [Keypoint], (cy, cx): (f64, f64)) -> Option<(&'a Keypoint, f64)> {
    kps.iter()
        .filter(|k| k.visible)
        .map(|k| (k, ((k.y - cy).powi(2) + (k.x - cx).powi(2)).sqrt()))
        .fold(None, |best, (k, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((k, d)),
        })
}

#[derive(Default)]
struct Tally {
    hits: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.hits += usize::from(hit);
        self.total += 1;
    }

    fn report(&self, name: &str, notes: &[String]) -> MetricReport {
        let mut r = MetricReport::new(name);
        r.samples = self.total;
        if self.total > 0 {
            r.value = Some(self.hits as f64 / self.total as f64);
        }
        r.details.insert("hits".into(), self.hits as f64);
        r.notes = notes.to_vec();
        r
    }
}

/// Segmentation and keypoint hit rates of the selected cells. Returns five
/// reports: segmentation (query, distractor), keypoint proximity (query,
/// distractor) and same-nearest-keypoint.
pub fn region_annotation_hit_rate(
    results: &[ExplanationResult],
    annotations: &AnnotationSet,
    rf: &ReceptiveFieldMap,
    radius: f64,
) -> Result<Vec<MetricReport>> {
    let mut seg_q = Tally::default();
    let mut seg_d = Tally::default();
    let mut kp_q = Tally::default();
    let mut kp_d = Tally::default();
    let mut same = Tally::default();
    let mut notes = Vec::new();

    let in_mask = |ann: &Annotation, rect: &Rect| -> Option<bool> {
        let (cy, cx) = rect_center(rect);
        ann.mask.as_ref().map(|m| m.contains(cy.round() as usize, cx.round() as usize))
    };
    let near = |ann: &Annotation, rect: &Rect| -> Option<bool> {
        nearest_keypoint(&ann.keypoints, rect_center(rect)).map(|(_, d)| d <= radius + 1e-9)
    };

    for (k, r) in results.iter().enumerate() {
        let lookup = |id: &Option<String>| id.as_ref().and_then(|i| annotations.images.get(i));
        let (Some(qa), Some(da)) = (lookup(&r.query_id), lookup(&r.distractor_id)) else {
            notes.push(format!("skipped `{}`: missing annotation", result_id(r, k)));
            continue;
        };
        for e in &r.edits {
            let rq = rf.rect_at(e.query)?;
            let rd = rf.rect_at(e.distractor)?;
            if let Some(hit) = in_mask(qa, &rq) {
                seg_q.add(hit);
            }
            if let Some(hit) = in_mask(da, &rd) {
                seg_d.add(hit);
            }
            if let Some(hit) = near(qa, &rq) {
                kp_q.add(hit);
            }
            if let Some(hit) = near(da, &rd) {
                kp_d.add(hit);
            }
            if let (Some((a, _)), Some((b, _))) = (
                nearest_keypoint(&qa.keypoints, rect_center(&rq)),
                nearest_keypoint(&da.keypoints, rect_center(&rd)),
            ) {
                same.add(a.name == b.name);
            }
        }
    }
    let mut reports = vec![
        seg_q.report("segmentation-query", &notes),
        seg_d.report("segmentation-distractor", &notes),
        kp_q.report("keypoint-query", &notes),
        kp_d.report("keypoint-distractor", &notes),
        same.report("same-keypoint", &notes),
    ];
    for r in &mut reports[2..4] {
        r.details.insert("radius".into(), radius);
    }
    Ok(reports)
}

/// Per-class attribute vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeTable {
    pub version: u32,
    pub classes: Vec<Vec<f64>>,
}

impl AttributeTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: AttributeTable =
            serde_json::from_str(&text).map_err(|e| Error::format("attributes", e.to_string()))?;
        if table.version != ANNOTATION_FORMAT_VERSION {
            return Err(Error::Version {
                found: table.version,
                supported: ANNOTATION_FORMAT_VERSION,
            });
        }
        if let Some(first) = table.classes.first() {
            if let Some(bad) = table.classes.iter().position(|c| c.len() != first.len()) {
                return Err(Error::format(format!("classes[{bad}]"), "attribute vectors differ in length"));
            }
        }
        Ok(table)
    }
}

/// Uniform class other than `class`.
pub fn random_distractor_class<R: Rng>(class: usize, classes: usize, rng: &mut R) -> Result<usize> {
    if classes < 2 || class >= classes {
        return Err(Error::InvalidValue(format!(
            "cannot pick a distractor class for class {class} of {classes}"
        )));
    }
    let k = rng.gen_range(0..classes - 1);
    Ok(if k >= class { k + 1 } else { k })
}

/// Class other than `class` whose attribute vector is nearest (Euclidean);
/// ties go to the smaller index.
pub fn nearest_distractor_class(class: usize, table: &AttributeTable) -> Result<usize> {
    let own = table.classes.get(class).ok_or(Error::Bounds {
        what: "class",
        index: class,
        len: table.classes.len(),
    })?;
    table
        .classes
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != class)
        .map(|(k, v)| (k, v.iter().zip(own).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
        .fold(None, |best: Option<(usize, f64)>, (k, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((k, d)),
        })
        .map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidValue("attribute table needs at least 2 classes".into()))
}

/// Candidate whose shared visible keypoints are closest on average to the
/// query's; candidates sharing none are skipped.
pub fn nearest_by_keypoints(query: &[Keypoint], candidates: &[(String, Vec<Keypoint>)]) -> Option<String> {
    let mut best: Option<(&str, f64)> = None;
    for (id, kps) in candidates {
        let dists: Vec<f64> = query
            .iter()
            .filter(|q| q.visible)
            .filter_map(|q| {
                kps.iter()
                    .find(|k| k.visible && k.name == q.name)
                    .map(|k| ((k.x - q.x).powi(2) + (k.y - q.y).powi(2)).sqrt())
            })
            .collect();
        if dists.is_empty() {
            continue;
        }
        let d = mean(&dists);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((id, d));
        }
    }
    best.map(|(id, _)| id.to_string())
}

/// Cell whose receptive-field center is nearest to pixel `(y, x)`.
pub fn cell_nearest_pixel(rf: &ReceptiveFieldMap, y: f64, x: f64) -> Cell {
    let mut best = (0, f64::INFINITY);
    for (k, r) in rf.rects().iter().enumerate() {
        let (cy, cx) = r.center();
        let d = (cy - y).powi(2) + (cx - x).powi(2);
        if d < best.1 {
            best = (k, d);
        }
    }
    Cell::new(best.0 / rf.grid_width(), best.0 % rf.grid_width())
}
