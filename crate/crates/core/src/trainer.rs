//! Policy-gradient training of `U - lambda * sum_{i<j} D_ij^2` and the sweep
//! over the penalty weight `lambda`.
//!
//! Click records are folded per query into IPS relevance weights
//! (`mean_k c/p`) and group merits before training. Both estimates are linear
//! in the clicks, so a step on the folded query has the same expectation as
//! a step on one of its impressions, at lower variance.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicksim::{ClickRecord, ExaminationModel};
use crate::dataset::{DatasetSplit, Query};
use crate::estimators::{group_pairs, MetricWeight, RANKING_ENUMERATION_CAP};
use crate::policy::{all_rankings, argmax_ranking, pl_grad_log_prob_into, pl_log_prob, pl_sample, softmax_entropy};
use crate::policy::{ScorerKind, ScorerParams, DEFAULT_HIDDEN};
use crate::{seed, Error, Ranking, Result};

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.1, 1.0, 10.0, 100.0, 1000.0];

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Which quantities use inverse propensity weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    FullIps,
    /// Propensities treated as 1 everywhere.
    NoIps,
    /// IPS in the utility, propensity 1 in the disparity.
    UtilityIpsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_grid: Vec<f64>,
    /// Threshold on the validation disparity. `None` is unconstrained.
    pub delta: Option<f64>,
    /// Monte-Carlo rankings per query.
    pub samples: usize,
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub entropy_gamma_init: f64,
    pub gamma_decay_factor: f64,
    /// Validation checks without improvement before the entropy weight decays.
    pub plateau_patience: usize,
    /// Queries in the running disparity average.
    pub running_window: usize,
    pub reset_running_each_epoch: bool,
    pub epochs: usize,
    pub validations_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub group_blind: bool,
    pub noise_eps_minus: Option<f64>,
    pub full_info: bool,
    pub model: ScorerKind,
    pub hidden: usize,
    /// `None` pairs SGD with the linear scorer and Adam with the network.
    pub optimizer: Option<OptimizerKind>,
    pub metric: MetricWeight,
    /// Position-bias severity of the exposure model inside the disparity.
    pub exposure_eta: f64,
    /// Recompute click propensities from the logged ranks with this severity
    /// instead of using the recorded ones (misspecified-propensity studies).
    pub propensity_eta: Option<f64>,
    /// Optional cap on the gradient norm of a single step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            delta: None,
            samples: 32,
            learning_rate: 0.001,
            l2_coeff: 0.0,
            entropy_gamma_init: 1.0,
            gamma_decay_factor: 3.0,
            plateau_patience: 3,
            running_window: 100,
            reset_running_each_epoch: false,
            epochs: 20,
            validations_per_epoch: 1,
            batch_size: 1,
            seed: 0,
            ablation: Ablation::FullIps,
            group_blind: false,
            noise_eps_minus: None,
            full_info: false,
            model: ScorerKind::Linear,
            hidden: DEFAULT_HIDDEN,
            optimizer: None,
            metric: MetricWeight::Dcg,
            exposure_eta: 1.0,
            propensity_eta: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid must not be empty".into());
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("lambda_grid values must be finite and >= 0: {:?}", self.lambda_grid));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("lambda_grid must be sorted: {:?}", self.lambda_grid));
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0) {
                return bad(format!("delta must be >= 0, got {d}"));
            }
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.l2_coeff >= 0.0) || !(self.entropy_gamma_init >= 0.0) {
            return bad("l2_coeff and entropy_gamma_init must be >= 0".into());
        }
        if !(self.gamma_decay_factor >= 1.0) {
            return bad(format!("gamma_decay_factor must be >= 1, got {}", self.gamma_decay_factor));
        }
        if self.running_window == 0 || self.batch_size == 0 || self.validations_per_epoch == 0 {
            return bad("running_window, batch_size and validations_per_epoch must be >= 1".into());
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be >= 1".into());
        }
        if let Some(e) = self.noise_eps_minus {
            if !(0.0..1.0).contains(&e) {
                return bad(format!("noise_eps_minus must lie in [0, 1), got {e}"));
            }
        }
        if self.model == ScorerKind::OneHidden && self.hidden == 0 {
            return bad("hidden must be >= 1 for the one-hidden-layer scorer".into());
        }
        if !(self.exposure_eta >= 0.0) {
            return bad(format!("exposure_eta must be >= 0, got {}", self.exposure_eta));
        }
        if let Some(e) = self.propensity_eta {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("propensity_eta must be finite and >= 0, got {e}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.model {
            ScorerKind::Linear => OptimizerKind::Sgd,
            ScorerKind::OneHidden => OptimizerKind::Adam,
        })
    }
}

// ---------------------------------------------------------------------------
// Prepared training data

/// A query with its click records folded into per-item utility weights and
/// per-group merits.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub qid: String,
    pub features: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
    /// Mean of `c_d / p_d` over the query's impressions.
    pub utility_weights: Vec<f64>,
    /// Group merits entering the disparity, noise-corrected when configured.
    pub merits: Vec<f64>,
    /// Impressions of this query relative to the mean over queries.
    pub weight: f64,
}

impl PreparedQuery {
    fn feature_refs(&self) -> Vec<&[f64]> {
        self.features.iter().map(Vec::as_slice).collect()
    }
}

/// Everything a step needs besides the parameters.
#[derive(Debug, Clone)]
pub struct Problem {
    pub queries: Vec<PreparedQuery>,
    pub group_count: usize,
    pub pairs: Vec<(usize, usize)>,
    pub exposure: ExaminationModel,
    pub metric: MetricWeight,
    /// Inputs zeroed for group-blind training.
    pub blind_features: Vec<usize>,
}

impl Problem {
    /// Folds `records` into the queries they refer to. Queries without any
    /// record are dropped with a warning; unknown query ids are an error.
    pub fn new(
        queries: &[Query],
        records: &[ClickRecord],
        group_count: usize,
        group_feature_ids: &[usize],
        config: &TrainConfig,
    ) -> Result<Self> {
        let full_info: Vec<ClickRecord>;
        let records = if config.full_info {
            full_info = queries.iter().map(ClickRecord::full_information).collect();
            &full_info[..]
        } else {
            records
        };
        let index: HashMap<&str, usize> = queries.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
        let mut util = vec![Vec::new(); queries.len()];
        let mut disp = vec![Vec::new(); queries.len()];
        let mut counts = vec![0usize; queries.len()];
        for rec in records {
            let &qi = index.get(rec.qid.as_str()).ok_or_else(|| Error::UnknownQuery(rec.qid.clone()))?;
            let n = queries[qi].len();
            if rec.clicks.len() != n || rec.propensities.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: rec.clicks.len() });
            }
            if counts[qi] == 0 {
                util[qi] = vec![0.0; n];
                disp[qi] = vec![0.0; n];
            }
            counts[qi] += 1;
            for (d, (&c, &recorded)) in rec.clicks.iter().zip(&rec.propensities).enumerate() {
                let p = match config.propensity_eta.filter(|_| !config.full_info) {
                    Some(eta) => (1.0 / rec.logged_ranking.rank_of(d) as f64).powf(eta),
                    None => recorded,
                };
                if !(p > 0.0) {
                    return Err(Error::NonPositivePropensity { item: d, value: p });
                }
                if c == 1 {
                    util[qi][d] += match config.ablation {
                        Ablation::NoIps => 1.0,
                        _ => 1.0 / p,
                    };
                    disp[qi][d] += match config.ablation {
                        Ablation::FullIps => 1.0 / p,
                        _ => 1.0,
                    };
                }
            }
        }
        let covered = counts.iter().filter(|&&k| k > 0).count();
        if covered == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        if covered < queries.len() {
            warn!("{} of {} queries have no click records and are skipped", queries.len() - covered, queries.len());
        }
        let mean_count = counts.iter().sum::<usize>() as f64 / covered as f64;
        let eps = config.noise_eps_minus.unwrap_or(0.0);
        let mut prepared = Vec::with_capacity(covered);
        for (qi, q) in queries.iter().enumerate() {
            let k = counts[qi];
            if k == 0 {
                continue;
            }
            let mut features: Vec<Vec<f64>> = q.items.iter().map(|it| it.features.clone()).collect();
            if config.group_blind {
                for x in &mut features {
                    for &id in group_feature_ids {
                        if let Some(v) = x.get_mut(id) {
                            *v = 0.0;
                        }
                    }
                }
            }
            let groups = q.groups();
            let mut merits = vec![0.0; group_count];
            for (d, &g) in groups.iter().enumerate() {
                merits[g] += disp[qi][d] / k as f64 - eps;
            }
            prepared.push(PreparedQuery {
                qid: q.id.clone(),
                features,
                groups,
                utility_weights: util[qi].iter().map(|u| u / k as f64).collect(),
                merits,
                weight: k as f64 / mean_count,
            });
        }
        let mut problem = Self::from_prepared(prepared, group_count, config);
        if config.group_blind {
            problem.blind_features = group_feature_ids.to_vec();
        }
        Ok(problem)
    }

    pub fn from_prepared(queries: Vec<PreparedQuery>, group_count: usize, config: &TrainConfig) -> Self {
        Self {
            queries,
            group_count,
            pairs: group_pairs(group_count),
            exposure: ExaminationModel::position_bias(config.exposure_eta),
            metric: config.metric,
            blind_features: Vec::new(),
        }
    }

    pub fn feature_count(&self) -> usize {
        self.queries.first().and_then(|q| q.features.first()).map_or(0, Vec::len)
    }
}

// ---------------------------------------------------------------------------
// Per-query expectations and their score gradients

/// Rankings with weights summing to one: either Monte-Carlo draws or the
/// full enumeration weighted by probability.
struct WeightedRankings {
    rankings: Vec<Ranking>,
    weights: Vec<f64>,
    /// Rescales the baseline-corrected sum. With the sample-mean baseline the
    /// factor `S/(S-1)` makes it equal to the leave-one-out estimator, which
    /// is unbiased.
    scale: f64,
    use_baseline: bool,
}

impl WeightedRankings {
    fn sampled(scores: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> Self {
        let rankings: Vec<Ranking> = (0..samples).map(|_| pl_sample(scores, rng).ranking).collect();
        let use_baseline = samples > 1;
        Self {
            rankings,
            weights: vec![1.0 / samples as f64; samples],
            scale: if use_baseline { samples as f64 / (samples - 1) as f64 } else { 1.0 },
            use_baseline,
        }
    }

    fn exact(scores: &[f64]) -> Result<Self> {
        if scores.len() > RANKING_ENUMERATION_CAP {
            return Err(Error::Domain(format!(
                "{} items exceed the enumeration cap {RANKING_ENUMERATION_CAP}",
                scores.len()
            )));
        }
        let rankings = all_rankings(scores.len());
        let weights = rankings.iter().map(|r| pl_log_prob(scores, r).exp()).collect();
        Ok(Self { rankings, weights, scale: 1.0, use_baseline: true })
    }
}

/// Expected utility, disparities and entropy of one query with their
/// gradients with respect to the score vector.
#[derive(Debug, Clone)]
pub struct QueryTerms {
    pub utility: f64,
    pub disparities: Vec<f64>,
    pub entropy: f64,
    pub d_utility: Vec<f64>,
    pub d_disparities: Vec<Vec<f64>>,
    pub d_entropy: Vec<f64>,
}

fn query_terms(problem: &Problem, query: &PreparedQuery, scores: &[f64], wr: &WeightedRankings) -> QueryTerms {
    let n = scores.len();
    let pairs = &problem.pairs;
    let mut grads = Vec::with_capacity(wr.rankings.len());
    let mut rewards = Vec::with_capacity(wr.rankings.len());
    let mut diffs = Vec::with_capacity(wr.rankings.len());
    let mut exposure = vec![0.0; problem.group_count];
    for r in &wr.rankings {
        let mut g = vec![0.0; n];
        pl_grad_log_prob_into(scores, r, &mut g);
        grads.push(g);
        exposure.iter_mut().for_each(|e| *e = 0.0);
        let mut reward = 0.0;
        for (d, &k) in r.ranks().iter().enumerate() {
            reward += problem.metric.weight(k) * query.utility_weights[d];
            exposure[query.groups[d]] += problem.exposure.examination(k);
        }
        rewards.push(reward);
        let m = &query.merits;
        diffs.push(pairs.iter().map(|&(i, j)| m[j] * exposure[i] - m[i] * exposure[j]).collect::<Vec<f64>>());
    }
    let utility: f64 = wr.weights.iter().zip(&rewards).map(|(w, r)| w * r).sum();
    let disparities: Vec<f64> =
        (0..pairs.len()).map(|p| wr.weights.iter().zip(&diffs).map(|(w, d)| w * d[p]).sum()).collect();

    let score_function = |values: &dyn Fn(usize) -> f64, baseline: f64| {
        let b = if wr.use_baseline { baseline } else { 0.0 };
        let mut out = vec![0.0; n];
        for (s, g) in grads.iter().enumerate() {
            let a = wr.scale * wr.weights[s] * (values(s) - b);
            if a != 0.0 {
                out.iter_mut().zip(g).for_each(|(o, gi)| *o += a * gi);
            }
        }
        out
    };
    let d_utility = score_function(&|s| rewards[s], utility);
    let d_disparities = (0..pairs.len()).map(|p| score_function(&|s| diffs[s][p], disparities[p])).collect();
    let (entropy, d_entropy) = softmax_entropy(scores);
    QueryTerms { utility, disparities, entropy, d_utility, d_disparities, d_entropy }
}

/// `sum_{i<j} D_ij^2` over the per-pair disparities.
pub fn multi_group_objective(disparities: &[f64]) -> f64 {
    disparities.iter().map(|d| d * d).sum()
}

// ---------------------------------------------------------------------------
// Running disparity average

/// Per group pair, the last `window` per-query disparity estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningDisparity {
    window: usize,
    buffers: Vec<VecDeque<(usize, f64)>>,
}

impl RunningDisparity {
    pub fn new(pairs: usize, window: usize) -> Self {
        Self { window: window.max(1), buffers: vec![VecDeque::with_capacity(window); pairs] }
    }

    pub fn len(&self, pair: usize) -> usize {
        self.buffers[pair].len()
    }

    pub fn is_empty(&self, pair: usize) -> bool {
        self.buffers[pair].is_empty()
    }

    /// Arithmetic mean of the buffered values, 0 when empty.
    pub fn mean(&self, pair: usize) -> f64 {
        let b = &self.buffers[pair];
        if b.is_empty() {
            return 0.0;
        }
        b.iter().map(|(_, v)| v).sum::<f64>() / b.len() as f64
    }

    /// Mean of the window that `current` would complete: the newest
    /// `window - 1` buffered values plus `current`.
    pub fn mean_with(&self, pair: usize, current: &[f64]) -> f64 {
        let b = &self.buffers[pair];
        let keep = self.window.saturating_sub(current.len()).min(b.len());
        let old: f64 = b.iter().skip(b.len() - keep).map(|(_, v)| v).sum();
        let taken = current.len().min(self.window);
        let new: f64 = current[current.len() - taken..].iter().sum();
        (old + new) / (keep + taken) as f64
    }

    pub fn push(&mut self, pair: usize, step: usize, value: f64) {
        let b = &mut self.buffers[pair];
        if b.len() == self.window {
            b.pop_front();
        }
        b.push_back((step, value));
    }

    pub fn clear(&mut self) {
        self.buffers.iter_mut().for_each(VecDeque::clear);
    }

    pub fn values(&self, pair: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.buffers[pair].iter().copied()
    }
}

// ---------------------------------------------------------------------------
// Optimizer and training state

#[derive(Debug, Clone)]
enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 },
        }
    }

    /// One ascent step along `grad`.
    fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p += lr * g),
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for k in 0..params.len() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
                    params[k] += lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// State carried between steps of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub running: RunningDisparity,
    pub gamma: f64,
    pub step: usize,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(problem: &Problem, params: &ScorerParams, config: &TrainConfig, seed: u64) -> Self {
        Self {
            running: RunningDisparity::new(problem.pairs.len(), config.running_window),
            gamma: config.entropy_gamma_init,
            step: 0,
            optimizer: Optimizer::new(config.optimizer_kind(), params.len()),
            rng: seed::rng(seed),
        }
    }
}

/// How expectations over rankings are formed inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Sampled(usize),
    /// Full enumeration, for queries within the enumeration cap.
    Exact,
}

/// What a step saw, for tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Query-weighted expected utility, averaged over the batch.
    pub utility: f64,
    /// Query-weighted disparity estimates of each batch query, per pair.
    pub disparities: Vec<Vec<f64>>,
    /// Running means used in the gradient, per pair.
    pub running_means: Vec<f64>,
}

/// Ascent direction for a batch of queries: utility gradient minus
/// `lambda * 2 * Dbar * grad D` per pair plus `gamma * grad H` minus the L2
/// term. `Dbar` includes the batch's own estimates.
pub fn step_direction(
    params: &ScorerParams,
    problem: &Problem,
    batch: &[usize],
    config: &TrainConfig,
    lambda: f64,
    state: &mut TrainState,
    mode: GradientMode,
) -> Result<(Vec<f64>, StepReport)> {
    let pairs = problem.pairs.len();
    let mut terms = Vec::with_capacity(batch.len());
    for &qi in batch {
        let q = &problem.queries[qi];
        let scores = params.scores_of(&q.feature_refs())?;
        let wr = match mode {
            GradientMode::Sampled(s) => WeightedRankings::sampled(&scores, s, &mut state.rng),
            GradientMode::Exact => WeightedRankings::exact(&scores)?,
        };
        terms.push(query_terms(problem, q, &scores, &wr));
    }
    let weighted: Vec<Vec<f64>> = batch
        .iter()
        .zip(&terms)
        .map(|(&qi, t)| t.disparities.iter().map(|d| problem.queries[qi].weight * d).collect())
        .collect();
    let running_means: Vec<f64> = (0..pairs)
        .map(|p| {
            let current: Vec<f64> = weighted.iter().map(|w| w[p]).collect();
            state.running.mean_with(p, &current)
        })
        .collect();

    let mut grad = vec![0.0; params.len()];
    let inv = 1.0 / batch.len() as f64;
    let mut utility = 0.0;
    for (&qi, t) in batch.iter().zip(&terms) {
        let q = &problem.queries[qi];
        utility += inv * q.weight * t.utility;
        let mut dscores: Vec<f64> = t.d_utility.iter().map(|g| q.weight * g).collect();
        for (p, dd) in t.d_disparities.iter().enumerate() {
            let coef = lambda * 2.0 * running_means[p] * q.weight;
            if coef != 0.0 {
                dscores.iter_mut().zip(dd).for_each(|(s, g)| *s -= coef * g);
            }
        }
        if state.gamma != 0.0 {
            dscores.iter_mut().zip(&t.d_entropy).for_each(|(s, g)| *s += state.gamma * g);
        }
        dscores.iter_mut().for_each(|s| *s *= inv);
        params.backprop(&q.feature_refs(), &dscores, &mut grad);
    }
    if config.l2_coeff != 0.0 {
        grad.iter_mut().zip(&params.params).for_each(|(g, p)| *g -= config.l2_coeff * p);
    }
    Ok((grad, StepReport { utility, disparities: weighted, running_means }))
}

/// One optimizer step on a batch of queries. The running buffers receive the
/// batch's disparity estimates afterwards.
pub fn step(
    params: &mut ScorerParams,
    problem: &Problem,
    batch: &[usize],
    config: &TrainConfig,
    lambda: f64,
    state: &mut TrainState,
) -> Result<StepReport> {
    let (mut grad, report) =
        step_direction(params, problem, batch, config, lambda, state, GradientMode::Sampled(config.samples))?;
    if grad.iter().any(|g| !g.is_finite()) {
        let qids: Vec<&str> = batch.iter().map(|&qi| problem.queries[qi].qid.as_str()).collect();
        let max_param = params.params.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        return Err(Error::NonFiniteGradient {
            step: state.step,
            snapshot: format!(
                "queries {qids:?}, lambda {lambda}, gamma {}, max |theta| {max_param}, running means {:?}",
                state.gamma, report.running_means
            ),
        });
    }
    if let Some(clip) = config.grad_clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            grad.iter_mut().for_each(|g| *g *= clip / norm);
        }
    }
    state.optimizer.ascend(&mut params.params, &grad, config.learning_rate);
    for per_query in &report.disparities {
        for (p, &d) in per_query.iter().enumerate() {
            state.running.push(p, state.step, d);
        }
    }
    state.step += 1;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Exact objective, for gradient checks on small queries

/// `mean_q w_q U_q - lambda * sum_p (mean_q w_q D_qp)^2 + gamma * mean_q H_q`
/// with expectations over rankings enumerated exactly.
pub fn exact_objective(params: &ScorerParams, problem: &Problem, lambda: f64, gamma: f64) -> Result<f64> {
    let nq = problem.queries.len() as f64;
    let mut utility = 0.0;
    let mut entropy = 0.0;
    let mut disparities = vec![0.0; problem.pairs.len()];
    for q in &problem.queries {
        let scores = params.scores_of(&q.feature_refs())?;
        let wr = WeightedRankings::exact(&scores)?;
        let t = query_terms(problem, q, &scores, &wr);
        utility += q.weight * t.utility / nq;
        entropy += t.entropy / nq;
        disparities.iter_mut().zip(&t.disparities).for_each(|(a, d)| *a += q.weight * d / nq);
    }
    Ok(utility - lambda * multi_group_objective(&disparities) + gamma * entropy)
}

/// Gradient of [`exact_objective`] assembled from enumerated score-function
/// expectations, i.e. the step direction with exact disparities in place of
/// the running average.
pub fn exact_gradient(params: &ScorerParams, problem: &Problem, lambda: f64, gamma: f64) -> Result<Vec<f64>> {
    let nq = problem.queries.len() as f64;
    let mut all = Vec::with_capacity(problem.queries.len());
    let mut disparities = vec![0.0; problem.pairs.len()];
    for q in &problem.queries {
        let scores = params.scores_of(&q.feature_refs())?;
        let wr = WeightedRankings::exact(&scores)?;
        let t = query_terms(problem, q, &scores, &wr);
        disparities.iter_mut().zip(&t.disparities).for_each(|(a, d)| *a += q.weight * d / nq);
        all.push(t);
    }
    let mut grad = vec![0.0; params.len()];
    for (q, t) in problem.queries.iter().zip(&all) {
        let mut dscores: Vec<f64> = t.d_utility.iter().map(|g| q.weight * g / nq).collect();
        for (p, dd) in t.d_disparities.iter().enumerate() {
            let coef = lambda * 2.0 * disparities[p] * q.weight / nq;
            dscores.iter_mut().zip(dd).for_each(|(s, g)| *s -= coef * g);
        }
        dscores.iter_mut().zip(&t.d_entropy).for_each(|(s, g)| *s += gamma * g / nq);
        params.backprop(&q.feature_refs(), &dscores, &mut grad);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Validation

/// Estimated utility and disparities of the argmax rankings on a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub utility: f64,
    pub disparities: Vec<f64>,
    pub disparity_sq: f64,
}

impl ValidationMetrics {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.utility - lambda * self.disparity_sq
    }
}

pub fn validate(params: &ScorerParams, problem: &Problem) -> Result<ValidationMetrics> {
    let nq = problem.queries.len().max(1) as f64;
    let mut utility = 0.0;
    let mut disparities = vec![0.0; problem.pairs.len()];
    let mut exposure = vec![0.0; problem.group_count];
    for q in &problem.queries {
        let ranking = argmax_ranking(&params.scores_of(&q.feature_refs())?);
        exposure.iter_mut().for_each(|e| *e = 0.0);
        let mut u = 0.0;
        for (d, &k) in ranking.ranks().iter().enumerate() {
            u += problem.metric.weight(k) * q.utility_weights[d];
            exposure[q.groups[d]] += problem.exposure.examination(k);
        }
        utility += q.weight * u / nq;
        let m = &q.merits;
        for (acc, &(i, j)) in disparities.iter_mut().zip(&problem.pairs) {
            *acc += q.weight * (m[j] * exposure[i] - m[i] * exposure[j]) / nq;
        }
    }
    let disparity_sq = multi_group_objective(&disparities);
    Ok(ValidationMetrics { utility, disparities, disparity_sq })
}

// ---------------------------------------------------------------------------
// Training runs

/// One row of the per-epoch metrics trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub lambda: f64,
    pub epoch: usize,
    pub train_obj: f64,
    pub val_dcg: f64,
    pub val_disparity_sq: f64,
    pub gamma: f64,
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "lambda,epoch,train_obj,val_dcg,val_disparity_sq,gamma")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.lambda, r.epoch, r.train_obj, r.val_dcg, r.val_disparity_sq, r.gamma)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the best validation objective.
    pub params: ScorerParams,
    pub validation: ValidationMetrics,
    pub best_epoch: usize,
    pub trace: Vec<TraceRow>,
}

/// Builds the training and validation problems from a split and its logs.
pub fn build_problems(
    split: &DatasetSplit,
    train_logs: &[ClickRecord],
    validation_logs: &[ClickRecord],
    config: &TrainConfig,
) -> Result<(Problem, Problem)> {
    if split.train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let train = Problem::new(&split.train, train_logs, split.group_count, &split.group_feature_ids, config)?;
    let validation =
        Problem::new(&split.validation, validation_logs, split.group_count, &split.group_feature_ids, config).map_err(
            |e| match e {
                Error::EmptyTrainingSet => Error::Domain("validation logs cover no validation query".into()),
                e => e,
            },
        )?;
    Ok((train, validation))
}

/// Trains one policy for a fixed `lambda`.
pub fn train_one_lambda(
    split: &DatasetSplit,
    train_logs: &[ClickRecord],
    validation_logs: &[ClickRecord],
    config: &TrainConfig,
    lambda: f64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train, validation) = build_problems(split, train_logs, validation_logs, config)?;
    train_problem(&train, &validation, config, lambda, config.seed)
}

/// Initial parameters of a run, with `blind_features` cut from the input.
pub fn initial_params(feature_count: usize, blind_features: &[usize], config: &TrainConfig, seed: u64) -> ScorerParams {
    let mut params = ScorerParams::init(config.model, feature_count, config.hidden, seed::derive(seed, "init"));
    params.zero_inputs(blind_features);
    params
}

/// Trains on prepared problems. Validation runs `validations_per_epoch`
/// times per epoch; the entropy weight is divided by `gamma_decay_factor`
/// after `plateau_patience` checks without improvement of the validation
/// objective.
pub fn train_problem(
    train: &Problem,
    validation: &Problem,
    config: &TrainConfig,
    lambda: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.queries.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let feature_count = train.feature_count();
    let mut params = initial_params(feature_count, &train.blind_features, config, seed);
    let mut state = TrainState::new(train, &params, config, seed::derive(seed, "steps"));

    let mut best = validate(&params, validation)?;
    let mut best_obj = best.objective(lambda);
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut trace = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..train.queries.len()).collect();
    let batches_per_epoch = order.len().div_ceil(config.batch_size);
    let checks = config.validations_per_epoch.min(batches_per_epoch);
    for epoch in 1..=config.epochs {
        if config.reset_running_each_epoch {
            state.running.clear();
        }
        order.shuffle(&mut state.rng);
        let mut utility_sum = 0.0;
        let mut last = validate(&params, validation)?;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let report = step(&mut params, train, batch, config, lambda, &mut state)?;
            utility_sum += report.utility;
            if (b + 1) * checks / batches_per_epoch != b * checks / batches_per_epoch {
                last = validate(&params, validation)?;
                let obj = last.objective(lambda);
                if obj > best_obj {
                    best_obj = obj;
                    best = last.clone();
                    best_params = params.clone();
                    best_epoch = epoch;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.plateau_patience {
                        state.gamma /= config.gamma_decay_factor;
                        stale = 0;
                        debug!("lambda {lambda}: entropy weight decayed to {}", state.gamma);
                    }
                }
            }
        }
        let running: Vec<f64> = (0..train.pairs.len()).map(|p| state.running.mean(p)).collect();
        let train_obj = utility_sum / batches_per_epoch as f64 - lambda * multi_group_objective(&running);
        trace.push(TraceRow {
            lambda,
            epoch,
            train_obj,
            val_dcg: last.utility,
            val_disparity_sq: last.disparity_sq,
            gamma: state.gamma,
        });
        info!(
            "lambda {lambda} epoch {epoch}: train {train_obj:.4}, val utility {:.4}, val disparity^2 {:.5}",
            last.utility, last.disparity_sq
        );
    }
    Ok(TrainOutcome { params: best_params, validation: best, best_epoch, trace })
}

// ---------------------------------------------------------------------------
// Sweep

/// One trained point of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub seed: u64,
    pub params: Option<ScorerParams>,
    pub validation: Option<ValidationMetrics>,
    /// Validation `sum_{i<j} D_ij^2` of the trained policy.
    pub delta_lambda: Option<f64>,
    pub best_epoch: usize,
    pub trace: Vec<TraceRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub delta: Option<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub points: Vec<SweepPoint>,
    pub selected: Option<usize>,
    /// False when no point met the threshold and the least-disparity point was
    /// selected instead.
    pub constraint_satisfied: bool,
}

impl SweepResult {
    pub fn selected_point(&self) -> Option<&SweepPoint> {
        self.selected.map(|i| &self.points[i])
    }

    pub fn trace(&self) -> Vec<TraceRow> {
        self.points.iter().flat_map(|p| p.trace.iter().cloned()).collect()
    }
}

/// Picks the highest-utility point with `delta_lambda <= delta`, or the
/// lowest-disparity point when none qualifies.
pub fn select(points: &[SweepPoint], delta: Option<f64>) -> (Option<usize>, bool) {
    let ok: Vec<(usize, &ValidationMetrics)> =
        points.iter().enumerate().filter_map(|(i, p)| p.validation.as_ref().map(|v| (i, v))).collect();
    let feasible = ok
        .iter()
        .filter(|(_, v)| delta.is_none_or(|d| v.disparity_sq <= d))
        .max_by(|a, b| a.1.utility.total_cmp(&b.1.utility).then(b.0.cmp(&a.0)));
    if let Some((i, _)) = feasible {
        return (Some(*i), true);
    }
    let fallback =
        ok.iter().min_by(|a, b| a.1.disparity_sq.total_cmp(&b.1.disparity_sq).then(a.0.cmp(&b.0))).map(|(i, _)| *i);
    (fallback, false)
}

/// Trains one policy per grid value and applies the selection rule. A failing
/// grid point is recorded and does not stop the others.
pub fn sweep(
    split: &DatasetSplit,
    train_logs: &[ClickRecord],
    validation_logs: &[ClickRecord],
    config: &TrainConfig,
) -> Result<SweepResult> {
    config.validate()?;
    let (train, validation) = build_problems(split, train_logs, validation_logs, config)?;
    Ok(sweep_problem(&train, &validation, config))
}

pub fn sweep_problem(train: &Problem, validation: &Problem, config: &TrainConfig) -> SweepResult {
    let points: Vec<SweepPoint> = config
        .lambda_grid
        .iter()
        .map(|&lambda| {
            let seed = seed::derive(config.seed, &format!("lambda={lambda}"));
            match train_problem(train, validation, config, lambda, seed) {
                Ok(out) => SweepPoint {
                    lambda,
                    seed,
                    delta_lambda: Some(out.validation.disparity_sq),
                    params: Some(out.params),
                    validation: Some(out.validation),
                    best_epoch: out.best_epoch,
                    trace: out.trace,
                    error: None,
                },
                Err(e) => {
                    warn!("lambda {lambda} failed: {e}");
                    SweepPoint {
                        lambda,
                        seed,
                        params: None,
                        validation: None,
                        delta_lambda: None,
                        best_epoch: 0,
                        trace: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let (selected, constraint_satisfied) = select(&points, config.delta);
    SweepResult { delta: config.delta, pairs: train.pairs.clone(), points, selected, constraint_satisfied }
}
