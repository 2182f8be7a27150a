//! Continuous relaxation of the single best-edit problem.
//!
//! The gate `a = softmax(alpha)` and each alignment row `p_i = softmax(M_i)`
//! are optimized by plain gradient ascent on
//!
//! ```text
//! g_{c'}((1 - a) ∘ F + a ∘ (P F')) - λ_a H(a) - λ_P Σ_i a_i H(p_i)
//! ```
//!
//! and the sharpened solution is rounded to one discrete edit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{single_edit, FeatureGrid};
use crate::nn::kernels::gemm;
use crate::nn::{ModelBundle, Objective};
use crate::search::{BestEdit, CandidateFilter};

/// Additive logit offset for excluded cells; softmax maps it to exactly 0.
const MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxOptConfig {
    pub learning_rate: f64,
    /// The alignment logits step at `learning_rate × alignment_step_factor
    /// × hw`: each row's gradient carries a factor `a_i`, which starts at
    /// `1 / hw`.
    pub alignment_step_factor: f64,
    pub max_steps: usize,
    pub entropy_weight_gate: f64,
    pub entropy_weight_alignment: f64,
    pub sharpness_stop: f64,
    /// Weight each row's entropy by its gate value.
    pub gate_alignment_entropy: bool,
}

impl Default for RelaxOptConfig {
    fn default() -> Self {
        RelaxOptConfig {
            learning_rate: 0.3,
            alignment_step_factor: 4.0,
            max_steps: 300,
            entropy_weight_gate: 0.01,
            entropy_weight_alignment: 0.01,
            sharpness_stop: 0.95,
            gate_alignment_entropy: true,
        }
    }
}

impl RelaxOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "relaxed learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.alignment_step_factor > 0.0 && self.alignment_step_factor.is_finite()) {
            return Err(Error::Config(format!(
                "alignment step factor must be positive, got {}",
                self.alignment_step_factor
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("relaxed max steps must be positive".into()));
        }
        for (name, w) in [
            ("gate", self.entropy_weight_gate),
            ("alignment", self.entropy_weight_alignment),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} entropy weight must be nonnegative, got {w}"
                )));
            }
        }
        if !(self.sharpness_stop > 0.0 && self.sharpness_stop <= 1.0) {
            return Err(Error::Config(format!(
                "sharpness stop must be in (0, 1], got {}",
                self.sharpness_stop
            )));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Unconstrained logits: `alpha` for the gate, `logits` (row-major `n × n`)
/// for the alignment rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedParams {
    pub alpha: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RelaxedParams {
    pub fn zeros(cells: usize) -> Self {
        RelaxedParams {
            alpha: vec![0.0; cells],
            logits: vec![0.0; cells * cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.alpha.len()
    }
}

/// The relaxed objective for one `(F, F', c')` instance and candidate filter.
#[derive(Debug, Clone)]
pub struct RelaxedProblem<'a> {
    model: &'a ModelBundle,
    query: &'a FeatureGrid,
    distractor: &'a FeatureGrid,
    target: usize,
    config: RelaxOptConfig,
    gate_mask: Vec<f64>,
    column_mask: Vec<f64>,
}

/// Gate and alignment distributions of one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub gate: Vec<f64>,
    /// Row-major `n × n`; row `i` is `p_i`.
    pub alignment: Vec<f64>,
}

impl<'a> RelaxedProblem<'a> {
    pub fn new(
        model: &'a ModelBundle,
        query: &'a FeatureGrid,
        distractor: &'a FeatureGrid,
        target: usize,
        filter: &CandidateFilter,
        config: &RelaxOptConfig,
    ) -> Result<Self> {
        config.validate()?;
        query.same_shape(distractor)?;
        let n = query.cells();
        if filter.cells() != n {
            return Err(Error::Shape {
                dimension: "candidate filter",
                expected: n,
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
        let mask = |allowed: bool| if allowed { 0.0 } else { MASK };
        Ok(RelaxedProblem {
            model,
            query,
            distractor,
            target,
            config: config.clone(),
            gate_mask: (0..n).map(|i| mask(filter.query_allowed(i))).collect(),
            column_mask: (0..n).map(|j| mask(filter.distractor_allowed(j))).collect(),
        })
    }

    pub fn cells(&self) -> usize {
        self.query.cells()
    }

    pub fn distributions(&self, params: &RelaxedParams) -> Distributions {
        let n = self.cells();
        let masked: Vec<f64> = params.alpha.iter().zip(&self.gate_mask).map(|(a, m)| a + m).collect();
        let gate = softmax(&masked);
        let mut alignment = Vec::with_capacity(n * n);
        for row in params.logits.chunks(n) {
            let masked: Vec<f64> = row.iter().zip(&self.column_mask).map(|(a, m)| a + m).collect();
            alignment.extend(softmax(&masked));
        }
        Distributions { gate, alignment }
    }

    fn penalty(&self, dist: &Distributions) -> f64 {
        let n = self.cells();
        let row_entropy: f64 = dist
            .alignment
            .chunks(n)
            .zip(&dist.gate)
            .map(|(p, &a)| {
                let h = entropy(p);
                if self.config.gate_alignment_entropy {
                    a * h
                } else {
                    h
                }
            })
            .sum();
        self.config.entropy_weight_gate * entropy(&dist.gate)
            + self.config.entropy_weight_alignment * row_entropy
    }

    /// `P F'` as a row-major `n × d` matrix.
    fn aligned(&self, alignment: &[f64]) -> Vec<f64> {
        let n = self.cells();
        let d = self.query.depth();
        let mut q = vec![0.0; n * d];
        gemm(n, n, d, alignment, false, self.distractor.values(), false, 0.0, &mut q);
        q
    }

    fn edited(&self, dist: &Distributions, q: &[f64]) -> Result<FeatureGrid> {
        let d = self.query.depth();
        let values = self
            .query
            .values()
            .chunks(d)
            .zip(q.chunks(d))
            .zip(&dist.gate)
            .flat_map(|((f, qi), &a)| f.iter().zip(qi).map(move |(&x, &y)| (1.0 - a) * x + a * y))
            .collect();
        FeatureGrid::new(self.query.height(), self.query.width(), d, values)
    }

    pub fn objective(&self, params: &RelaxedParams) -> Result<f64> {
        let dist = self.distributions(params);
        let q = self.aligned(&dist.alignment);
        let grid = self.edited(&dist, &q)?;
        let g = self.model.head_logprobs(&grid)?.get(self.target);
        Ok(g - self.penalty(&dist))
    }

    /// Objective value and its gradient with respect to `alpha` and `logits`.
    pub fn objective_and_gradient(&self, params: &RelaxedParams) -> Result<(f64, RelaxedParams)> {
        let n = self.cells();
        let d = self.query.depth();
        let cfg = &self.config;
        let dist = self.distributions(params);
        let q = self.aligned(&dist.alignment);
        let grid = self.edited(&dist, &q)?;
        let (g, grad) = self
            .model
            .head_input_gradient(&grid, &Objective::ClassLogProb(self.target))?;
        let grad = grad.values();
        let value = g - self.penalty(&dist);

        let row_entropy: Vec<f64> = dist.alignment.chunks(n).map(entropy).collect();

        // d/da_i
        let mut da = vec![0.0; n];
        for i in 0..n {
            let a = dist.gate[i];
            let u: f64 = (0..d)
                .map(|k| grad[i * d + k] * (q[i * d + k] - self.query.values()[i * d + k]))
                .sum();
            let mut v = u;
            if a > 0.0 {
                v -= cfg.entropy_weight_gate * (-a.ln() - 1.0);
            }
            if cfg.gate_alignment_entropy {
                v -= cfg.entropy_weight_alignment * row_entropy[i];
            }
            da[i] = v;
        }

        // d/dP_ij = a_i (G F'^T)_ij minus the row entropy term
        let mut dp = vec![0.0; n * n];
        gemm(n, d, n, grad, false, self.distractor.values(), true, 0.0, &mut dp);
        for i in 0..n {
            let a = dist.gate[i];
            let scale = if cfg.gate_alignment_entropy { a } else { 1.0 };
            for j in 0..n {
                let p = dist.alignment[i * n + j];
                let mut v = a * dp[i * n + j];
                if p > 0.0 {
                    v -= cfg.entropy_weight_alignment * scale * (-p.ln() - 1.0);
                }
                dp[i * n + j] = v;
            }
        }

        // softmax chain rule
        let alpha = softmax_backward(&dist.gate, &da);
        let mut logits = Vec::with_capacity(n * n);
        for (p, w) in dist.alignment.chunks(n).zip(dp.chunks(n)) {
            logits.extend(softmax_backward(p, w));
        }
        Ok((value, RelaxedParams { alpha, logits }))
    }
}

fn softmax_backward(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
    p.iter().zip(upstream).map(|(&pi, &gi)| pi * (gi - mean)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedEdit {
    pub best: BestEdit,
    /// Objective value at each step.
    pub trajectory: Vec<f64>,
    pub steps: usize,
    /// Whether the sharpness stop fired before the step limit.
    pub converged: bool,
    pub params: RelaxedParams,
}

/// Gradient-ascent search for the single best edit, rounded by argmax.
pub fn best_edit_relaxed(
    model: &ModelBundle,
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    target: usize,
    filter: &CandidateFilter,
    config: &RelaxOptConfig,
) -> Result<RelaxedEdit> {
    let problem = RelaxedProblem::new(model, query, distractor, target, filter, config)?;
    let n = query.cells();
    let mut params = RelaxedParams::zeros(n);
    let mut trajectory = Vec::new();
    let mut converged = false;
    let lr_m = config.learning_rate * config.alignment_step_factor * n as f64;

    for _ in 0..config.max_steps {
        let dist = problem.distributions(&params);
        let i = masked_argmax(&dist.gate, |k| filter.query_allowed(k));
        let row = &dist.alignment[i * n..(i + 1) * n];
        let j = masked_argmax(row, |k| filter.distractor_allowed(k));
        if dist.gate[i] >= config.sharpness_stop && row[j] >= config.sharpness_stop {
            converged = true;
            break;
        }
        let (value, grad) = problem.objective_and_gradient(&params)?;
        trajectory.push(value);
        for (p, g) in params.alpha.iter_mut().zip(&grad.alpha) {
            *p += config.learning_rate * g;
        }
        for (p, g) in params.logits.iter_mut().zip(&grad.logits) {
            *p += lr_m * g;
        }
    }

    let dist = problem.distributions(&params);
    let i = masked_argmax(&dist.gate, |k| filter.query_allowed(k));
    let j = masked_argmax(&dist.alignment[i * n..(i + 1) * n], |k| filter.distractor_allowed(k));
    let score = model
        .head_logprobs(&single_edit(query, distractor, i, j)?)?
        .get(target);
    Ok(RelaxedEdit {
        best: BestEdit {
            query_cell: i,
            distractor_cell: j,
            score,
        },
        steps: trajectory.len(),
        trajectory,
        converged,
        params,
    })
}

fn masked_argmax(values: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if allowed(k) && best.map_or(true, |b| v > values[b]) {
            best = Some(k);
        }
    }
    best.expect("filter has at least one allowed cell")
}
