//! Exhaustive best-edit search and the greedy sequential edit loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{copy_cell, Edit, FeatureGrid};
use crate::image::Image;
use crate::nn::{LogProbVector, ModelBundle};
use crate::relaxed::{best_edit_relaxed, RelaxOptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionPolicy {
    /// Only the edited query cell leaves the candidate set.
    QueryCellsOnly,
    /// Both the edited query cell and its distractor source leave it.
    QueryAndDistractorCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Exhaustive,
    Relaxed,
}

/// When the greedy loop counts the decision as changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// The head's argmax over all classes is the target class.
    Argmax,
    /// The target log-probability exceeds that of the original class.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub exclusion: ExclusionPolicy,
    /// Edit budget; `None` means one per feature cell.
    pub max_edits: Option<usize>,
    pub strategy: Strategy,
    pub stop_rule: StopRule,
    /// Evaluate exhaustive candidates on the rayon pool.
    pub parallel: bool,
    pub relaxed: RelaxOptConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            exclusion: ExclusionPolicy::QueryAndDistractorCells,
            max_edits: None,
            strategy: Strategy::Exhaustive,
            stop_rule: StopRule::Argmax,
            parallel: true,
            relaxed: RelaxOptConfig::default(),
        }
    }
}

/// Which `(query cell, distractor cell)` pairs are still eligible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateFilter {
    query_excluded: Vec<bool>,
    distractor_excluded: Vec<bool>,
}

impl CandidateFilter {
    pub fn all(cells: usize) -> Self {
        CandidateFilter {
            query_excluded: vec![false; cells],
            distractor_excluded: vec![false; cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.query_excluded.len()
    }

    pub fn exclude_query(&mut self, cell: usize) {
        self.query_excluded[cell] = true;
    }

    pub fn exclude_distractor(&mut self, cell: usize) {
        self.distractor_excluded[cell] = true;
    }

    pub fn query_allowed(&self, cell: usize) -> bool {
        !self.query_excluded[cell]
    }

    pub fn distractor_allowed(&self, cell: usize) -> bool {
        !self.distractor_excluded[cell]
    }

    pub fn allows(&self, query: usize, distractor: usize) -> bool {
        self.query_allowed(query) && self.distractor_allowed(distractor)
    }

    pub fn remaining_pairs(&self) -> usize {
        let q = self.query_excluded.iter().filter(|&&x| !x).count();
        let d = self.distractor_excluded.iter().filter(|&&x| !x).count();
        q * d
    }

    pub fn is_empty(&self) -> bool {
        self.remaining_pairs() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestEdit {
    pub query_cell: usize,
    pub distractor_cell: usize,
    /// `g_{c'}` of the grid after the edit.
    pub score: f64,
}

fn check_inputs(
    model: &ModelBundle,
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    target: usize,
    filter: &CandidateFilter,
) -> Result<()> {
    query.same_shape(distractor)?;
    if filter.cells() != query.cells() {
        return Err(Error::Shape {
            dimension: "candidate filter",
            expected: query.cells(),
            actual: filter.cells(),
        });
    }
    if target >= model.classes() {
        return Err(Error::Bounds {
            what: "target class",
            index: target,
            len: model.classes(),
        });
    }
    if filter.is_empty() {
        return Err(Error::Exhausted);
    }
    Ok(())
}

/// Scores every eligible single edit and returns the one maximizing the
/// target log-probability; ties go to the smallest query cell, then the
/// smallest distractor cell.
pub fn best_edit_exhaustive(
    model: &ModelBundle,
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    target: usize,
    filter: &CandidateFilter,
) -> Result<BestEdit> {
    exhaustive_scan(model, query, distractor, target, filter, true).map(|(best, _)| best)
}

/// As [`best_edit_exhaustive`], also returning the winner's log-probabilities.
pub(crate) fn exhaustive_scan(
    model: &ModelBundle,
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    target: usize,
    filter: &CandidateFilter,
    parallel: bool,
) -> Result<(BestEdit, LogProbVector)> {
    check_inputs(model, query, distractor, target, filter)?;
    let n = query.cells();
    let d = query.depth();
    let classes = model.classes();
    let sources: Vec<usize> = (0..n).filter(|&j| filter.distractor_allowed(j)).collect();

    // One head batch per query cell: every eligible source copied into it.
    let scan_row = |i: usize| -> Option<(usize, f64, Vec<f64>)> {
        if !filter.query_allowed(i) {
            return None;
        }
        let mut grids = Vec::with_capacity(sources.len() * n * d);
        for &j in &sources {
            let start = grids.len();
            grids.extend_from_slice(query.values());
            grids[start + i * d..start + (i + 1) * d].copy_from_slice(distractor.row(j));
        }
        let out = model.head_logprobs_flat(grids, sources.len());
        let mut best: Option<(usize, f64)> = None;
        for (k, row) in out.chunks(classes).enumerate() {
            let s = row[target];
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        best.map(|(k, s)| (sources[k], s, out[k * classes..(k + 1) * classes].to_vec()))
    };

    let rows: Vec<Option<(usize, f64, Vec<f64>)>> = if parallel {
        (0..n).into_par_iter().map(scan_row).collect()
    } else {
        (0..n).map(scan_row).collect()
    };

    let mut best: Option<(BestEdit, Vec<f64>)> = None;
    for (i, row) in rows.into_iter().enumerate() {
        if let Some((j, score, lp)) = row {
            if best.as_ref().map_or(true, |(b, _)| score > b.score) {
                best = Some((
                    BestEdit {
                        query_cell: i,
                        distractor_cell: j,
                        score,
                    },
                    lp,
                ));
            }
        }
    }
    let (edit, lp) = best.ok_or(Error::Exhausted)?;
    Ok((edit, LogProbVector::from_vec(lp)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// `g_c`: log-probability of the query's original class.
    pub query_logprob: f64,
    /// `g_{c'}`: log-probability of the target class.
    pub target_logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Flipped,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub query_id: Option<String>,
    pub distractor_id: Option<String>,
    /// Class `c` predicted for the query.
    pub query_class: usize,
    /// Requested class `c'`.
    pub target_class: usize,
    /// Class the model predicts for the distractor.
    pub distractor_class: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub edits: Vec<Edit>,
    /// One point for the unedited query, then one per edit.
    pub trajectory: Vec<TrajectoryPoint>,
    pub status: Status,
}

/// Greedily edits `f(query)` towards `target` until the decision flips or
/// the candidates run out.
pub fn greedy_counterfactual(
    model: &ModelBundle,
    query: &Image,
    distractor: &Image,
    target: usize,
    config: &SearchConfig,
) -> Result<ExplanationResult> {
    let fq = model.forward_features(query)?;
    let fd = model.forward_features(distractor)?;
    greedy_from_features(model, &fq, &fd, target, config)
}

pub fn greedy_from_features(
    model: &ModelBundle,
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    target: usize,
    config: &SearchConfig,
) -> Result<ExplanationResult> {
    query.same_shape(distractor)?;
    if target >= model.classes() {
        return Err(Error::Bounds {
            what: "target class",
            index: target,
            len: model.classes(),
        });
    }
    let n = query.cells();
    let max_edits = config.max_edits.unwrap_or(n);
    if max_edits == 0 || max_edits > n {
        return Err(Error::Config(format!(
            "max edits must be in 1..={n}, got {max_edits}"
        )));
    }

    let mut lp = model.head_logprobs(query)?;
    let query_class = lp.argmax();
    let distractor_class = model.head_logprobs(distractor)?.argmax();
    if distractor_class != target {
        log::warn!(
            "distractor is predicted as class {distractor_class}, not the target {target}; proceeding"
        );
    }
    let mut result = ExplanationResult {
        query_id: None,
        distractor_id: None,
        query_class,
        target_class: target,
        distractor_class,
        grid_height: query.height(),
        grid_width: query.width(),
        edits: Vec::new(),
        trajectory: vec![TrajectoryPoint {
            query_logprob: lp.get(query_class),
            target_logprob: lp.get(target),
        }],
        status: Status::Flipped,
    };
    if query_class == target {
        return Ok(result);
    }

    let stopped = |lp: &LogProbVector| match config.stop_rule {
        StopRule::Argmax => lp.argmax() == target,
        StopRule::Pairwise => lp.get(target) > lp.get(query_class),
    };

    let mut current = query.clone();
    let mut filter = CandidateFilter::all(n);
    loop {
        if stopped(&lp) {
            result.status = Status::Flipped;
            break;
        }
        if result.edits.len() >= max_edits || filter.is_empty() {
            result.status = Status::Exhausted;
            break;
        }
        let (best, next_lp) = match config.strategy {
            Strategy::Exhaustive => {
                exhaustive_scan(model, &current, distractor, target, &filter, config.parallel)?
            }
            Strategy::Relaxed => {
                let relaxed =
                    best_edit_relaxed(model, &current, distractor, target, &filter, &config.relaxed)?;
                let mut edited = current.clone();
                copy_cell(&mut edited, distractor, relaxed.best.query_cell, relaxed.best.distractor_cell);
                (relaxed.best, model.head_logprobs(&edited)?)
            }
        };
        copy_cell(&mut current, distractor, best.query_cell, best.distractor_cell);
        lp = next_lp;
        result.edits.push(Edit {
            query: current.cell_at(best.query_cell),
            distractor: current.cell_at(best.distractor_cell),
        });
        result.trajectory.push(TrajectoryPoint {
            query_logprob: lp.get(query_class),
            target_logprob: lp.get(target),
        });
        filter.exclude_query(best.query_cell);
        if config.exclusion == ExclusionPolicy::QueryAndDistractorCells {
            filter.exclude_distractor(best.distractor_cell);
        }
    }
    Ok(result)
}

impl ExplanationResult {
    pub fn flipped(&self) -> bool {
        self.status == Status::Flipped
    }

    /// `g_{c'}` after the last edit.
    pub fn final_target_logprob(&self) -> f64 {
        self.trajectory.last().map_or(f64::NAN, |p| p.target_logprob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::single_edit;
    use crate::image::Geometry;
    use crate::nn::LayerSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear head on a `h × w × d` grid with explicit weights (inputs × classes).
    pub(crate) fn linear_model(h: usize, w: usize, d: usize, classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> ModelBundle {
        let mut m = ModelBundle::zeroed(
            Geometry::new(h, w, d),
            classes,
            &[],
            &[LayerSpec::Flatten, LayerSpec::Dense { outputs: classes }, LayerSpec::LogSoftmax],
        )
        .unwrap();
        m.set_head_parameters(1, weights, bias).unwrap();
        m
    }

    #[test]
    fn identical_constant_grids_tie_break_to_origin() {
        // every cell carries the same vector, so every edit is a no-op
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let m = linear_model(2, 2, 2, 3, (0..24).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![0.0; 3]);
        let f = FeatureGrid::new(2, 2, 2, [0.4, -0.7].repeat(4)).unwrap();
        let best = best_edit_exhaustive(&m, &f, &f, 1, &CandidateFilter::all(4)).unwrap();
        assert_eq!((best.query_cell, best.distractor_cell), (0, 0));
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            let (h, w, d, k) = (3, 3, 2, 4);
            let weights: Vec<f64> = (0..h * w * d * k).map(|_| r.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..k).map(|_| r.gen_range(-1.0..1.0)).collect();
            let m = linear_model(h, w, d, k, weights.clone(), bias.clone());
            let f: Vec<f64> = (0..h * w * d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let f2: Vec<f64> = (0..h * w * d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let target = case % k;
            // oracle: materialize all 81 grids, score with a scalar log-softmax
            let mut best = (usize::MAX, usize::MAX, f64::NEG_INFINITY);
            for i in 0..h * w {
                for j in 0..h * w {
                    let mut g = f.clone();
                    g[i * d..(i + 1) * d].copy_from_slice(&f2[j * d..(j + 1) * d]);
                    let logits: Vec<f64> = (0..k)
                        .map(|c| bias[c] + (0..h * w * d).map(|x| g[x] * weights[x * k + c]).sum::<f64>())
                        .collect();
                    let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                    let score = logits[target] - lse;
                    if score > best.2 + 1e-12 {
                        best = (i, j, score);
                    }
                }
            }
            let fg = FeatureGrid::new(h, w, d, f).unwrap();
            let fg2 = FeatureGrid::new(h, w, d, f2).unwrap();
            let got = best_edit_exhaustive(&m, &fg, &fg2, target, &CandidateFilter::all(9)).unwrap();
            assert_eq!((got.query_cell, got.distractor_cell), (best.0, best.1), "case {case}");
            assert!((got.score - best.2).abs() < 1e-9);
        }
    }

    #[test]
    fn single_raising_pair_is_found() {
        // weight +1 from cell 0 to class 1, nothing else
        let mut w = vec![0.0; 4 * 2];
        w[1] = 1.0;
        let m = linear_model(2, 2, 1, 2, w, vec![0.0; 2]);
        let f = FeatureGrid::zeros(2, 2, 1);
        let f2 = FeatureGrid::new(2, 2, 1, vec![9.0, 0.0, 0.0, 0.0]).unwrap();
        let best = best_edit_exhaustive(&m, &f, &f2, 1, &CandidateFilter::all(4)).unwrap();
        assert_eq!((best.query_cell, best.distractor_cell), (0, 0));
    }

    #[test]
    fn empty_filter_is_exhausted() {
        let m = linear_model(1, 2, 1, 2, vec![0.0; 4], vec![0.0; 2]);
        let f = FeatureGrid::zeros(1, 2, 1);
        let mut filter = CandidateFilter::all(2);
        filter.exclude_query(0);
        filter.exclude_query(1);
        assert!(matches!(best_edit_exhaustive(&m, &f, &f, 1, &filter), Err(Error::Exhausted)));
    }

    #[test]
    fn parallel_and_serial_scans_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = linear_model(3, 3, 2, 4, (0..72).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![0.1; 4]);
        let f = FeatureGrid::new(3, 3, 2, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let f2 = FeatureGrid::new(3, 3, 2, (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut filter = CandidateFilter::all(9);
        filter.exclude_query(4);
        filter.exclude_distractor(2);
        let a = exhaustive_scan(&m, &f, &f2, 2, &filter, true).unwrap();
        let b = exhaustive_scan(&m, &f, &f2, 2, &filter, false).unwrap();
        assert_eq!(a, b);
        assert!(filter.allows(a.0.query_cell, a.0.distractor_cell));
        let check = m
            .head_logprobs(&single_edit(&f, &f2, a.0.query_cell, a.0.distractor_cell).unwrap())
            .unwrap();
        assert_eq!(check, a.1);
    }

    #[test]
    fn already_target_is_empty_flipped() {
        let m = linear_model(1, 2, 1, 2, vec![0.0, 1.0, 0.0, 1.0], vec![0.0; 2]);
        let f = FeatureGrid::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
        let res = greedy_from_features(&m, &f, &f, 1, &SearchConfig::default()).unwrap();
        assert_eq!(res.status, Status::Flipped);
        assert!(res.edits.is_empty());
        assert_eq!(res.trajectory.len(), 1);
    }

    #[test]
    fn never_flipping_instance_is_exhausted() {
        // target logit is fixed lower than the other, edits cannot help
        let m = linear_model(2, 1, 1, 2, vec![0.0; 4], vec![1.0, 0.0]);
        let f = FeatureGrid::new(2, 1, 1, vec![0.0, 0.0]).unwrap();
        let f2 = FeatureGrid::new(2, 1, 1, vec![5.0, 5.0]).unwrap();
        let res = greedy_from_features(&m, &f, &f2, 1, &SearchConfig::default()).unwrap();
        assert_eq!(res.status, Status::Exhausted);
        assert_eq!(res.edits.len(), 2);
        assert_eq!(res.trajectory.len(), 3);
    }

    #[test]
    fn max_edits_bounds() {
        let m = linear_model(1, 2, 1, 2, vec![0.0; 4], vec![1.0, 0.0]);
        let f = FeatureGrid::zeros(1, 2, 1);
        let cfg = SearchConfig {
            max_edits: Some(3),
            ..SearchConfig::default()
        };
        assert!(matches!(greedy_from_features(&m, &f, &f, 1, &cfg), Err(Error::Config(_))));
        let cfg = SearchConfig {
            max_edits: Some(1),
            ..SearchConfig::default()
        };
        let res = greedy_from_features(&m, &f, &f, 1, &cfg).unwrap();
        assert_eq!(res.edits.len(), 1);
        assert_eq!(res.status, Status::Exhausted);
    }

    #[test]
    fn two_edit_instance() {
        // 2×2, d = 1, two classes. Class 1 logit = x0 + x3, class 0 bias 1.5.
        // Distractor cells 0 and 3 hold 1.0, so one copy gives 1.0 < 1.5 and
        // two copies give 2.0 > 1.5.
        let mut w = vec![0.0; 8];
        w[1] = 1.0;
        w[7] = 1.0;
        let m = linear_model(2, 2, 1, 2, w, vec![1.5, 0.0]);
        let f = FeatureGrid::zeros(2, 2, 1);
        let f2 = FeatureGrid::new(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let res = greedy_from_features(&m, &f, &f2, 1, &SearchConfig::default()).unwrap();
        assert_eq!(res.status, Status::Flipped);
        assert_eq!(res.edits.len(), 2);
        let queries: Vec<_> = res.edits.iter().map(|e| (e.query.row, e.query.col)).collect();
        assert_eq!(queries, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn exclusion_policies_differ_on_source_reuse() {
        // one very good source cell (0) and two query cells that reward it
        let mut w = vec![0.0; 3 * 2];
        w[1] = 1.0;
        w[3] = 1.0;
        let m = linear_model(1, 3, 1, 2, w, vec![1.5, 0.0]);
        let f = FeatureGrid::zeros(1, 3, 1);
        let f2 = FeatureGrid::new(1, 3, 1, vec![1.0, 0.1, 0.0]).unwrap();
        let strict = greedy_from_features(&m, &f, &f2, 1, &SearchConfig::default()).unwrap();
        let loose = greedy_from_features(
            &m,
            &f,
            &f2,
            1,
            &SearchConfig {
                exclusion: ExclusionPolicy::QueryCellsOnly,
                ..SearchConfig::default()
            },
        )
        .unwrap();
        assert_eq!(loose.status, Status::Flipped);
        assert_eq!(loose.edits.len(), 2);
        assert!(loose.edits.iter().all(|e| e.distractor.col == 0));
        // reusing source 0 is forbidden, so 1.0 + 0.1 < 1.5 never flips
        assert_eq!(strict.status, Status::Exhausted);
    }

    #[test]
    fn pairwise_rule_stops_earlier_than_argmax() {
        // three classes: c = 0, target 2, class 1 sits in between
        let mut w = vec![0.0; 2 * 3];
        w[2] = 1.0; // cell 0 -> class 2
        w[5] = 1.0; // cell 1 -> class 2
        let m = linear_model(1, 2, 1, 3, w, vec![2.0, 2.5, 0.0]);
        let f = FeatureGrid::zeros(1, 2, 1);
        let f2 = FeatureGrid::new(1, 2, 1, vec![2.2, 1.0]).unwrap();
        // g0 starts above g1? bias 2.5 on class 1 means c = 1 here
        let argmax_res = greedy_from_features(&m, &f, &f2, 2, &SearchConfig::default()).unwrap();
        assert_eq!(argmax_res.query_class, 1);
        assert_eq!(argmax_res.edits.len(), 2);
        let m2 = linear_model(1, 2, 1, 3, {
            let mut w = vec![0.0; 6];
            w[2] = 1.0;
            w[5] = 1.0;
            w
        }, vec![2.5, 2.0, 0.0]);
        let f2b = FeatureGrid::new(1, 2, 1, vec![2.6, 1.0]).unwrap();
        let pair = greedy_from_features(
            &m2,
            &f,
            &f2b,
            2,
            &SearchConfig {
                stop_rule: StopRule::Pairwise,
                ..SearchConfig::default()
            },
        )
        .unwrap();
        let strict = greedy_from_features(&m2, &f, &f2b, 2, &SearchConfig::default()).unwrap();
        // after one edit g2 = 2.6 > g0 = 2.5 but class 1 is not involved;
        // both rules stop after one edit here
        assert_eq!(pair.edits.len(), 1);
        assert_eq!(strict.edits.len(), 1);
    }

    fn random_instance(seed: u64) -> (ModelBundle, FeatureGrid, FeatureGrid, usize) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d, k) = (3, 3, 2, 3);
        let m = linear_model(
            h,
            w,
            d,
            k,
            (0..h * w * d * k).map(|_| r.gen_range(-1.0..1.0)).collect(),
            (0..k).map(|_| r.gen_range(-1.0..1.0)).collect(),
        );
        let f = FeatureGrid::new(h, w, d, (0..18).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let f2 = FeatureGrid::new(h, w, d, (0..18).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let target = r.gen_range(0..k);
        (m, f, f2, target)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn greedy_invariants(seed in proptest::prelude::any::<u64>(), loose in proptest::prelude::any::<bool>()) {
            let (m, f, f2, target) = random_instance(seed);
            let config = SearchConfig {
                exclusion: if loose { ExclusionPolicy::QueryCellsOnly } else { ExclusionPolicy::QueryAndDistractorCells },
                ..SearchConfig::default()
            };
            let res = greedy_from_features(&m, &f, &f2, target, &config).unwrap();
            proptest::prop_assert_eq!(res.trajectory.len(), res.edits.len() + 1);
            proptest::prop_assert!(res.edits.len() <= 9);
            let mut seen = std::collections::HashSet::new();
            for e in &res.edits {
                proptest::prop_assert!(seen.insert(e.query));
            }
            if !loose {
                let sources: std::collections::HashSet<_> = res.edits.iter().map(|e| e.distractor).collect();
                proptest::prop_assert_eq!(sources.len(), res.edits.len());
            }

            // replay: each recorded step is the best over the candidates left
            let mut current = f.clone();
            let mut filter = CandidateFilter::all(9);
            for (k, e) in res.edits.iter().enumerate() {
                let i = current.cell_index(e.query).unwrap();
                let j = current.cell_index(e.distractor).unwrap();
                let best = best_edit_exhaustive(&m, &current, &f2, target, &filter).unwrap();
                proptest::prop_assert_eq!((best.query_cell, best.distractor_cell), (i, j));
                proptest::prop_assert_eq!(best.score, res.trajectory[k + 1].target_logprob);
                copy_cell(&mut current, &f2, i, j);
                filter.exclude_query(i);
                if !loose {
                    filter.exclude_distractor(j);
                }
            }
            let final_class = m.head_logprobs(&current).unwrap().argmax();
            proptest::prop_assert_eq!(res.status == Status::Flipped, final_class == target);

            let serial = greedy_from_features(&m, &f, &f2, target, &SearchConfig { parallel: false, ..config }).unwrap();
            proptest::prop_assert_eq!(serial, res);
        }
    }
}
