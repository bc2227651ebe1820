//! Plackett-Luce ranking policies over pointwise scorers.
//!
//! A scorer maps each item's feature vector to a real score. The policy draws
//! a ranking by repeatedly picking one of the remaining items from the softmax
//! over their scores. All gradients are derived by hand; the test suite pins
//! them against central finite differences.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::{seed, Error, Ranking, Result};

/// Default hidden width of the one-hidden-layer scorer.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Linear,
    OneHidden,
}

/// Scorer parameters, stored flat.
///
/// Layout for `OneHidden` with `F` features and `H` hidden units:
/// `[W (H x F, row-major) | b (H) | v (H) | c]`, score `v . relu(W x + b) + c`.
/// `Linear` is just `w (F)`, score `w . x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub kind: ScorerKind,
    pub feature_count: usize,
    pub hidden: usize,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl ScorerParams {
    pub fn linear(weights: Vec<f64>) -> Self {
        Self { kind: ScorerKind::Linear, feature_count: weights.len(), hidden: 0, seed: 0, params: weights }
    }

    pub fn zeros(kind: ScorerKind, feature_count: usize, hidden: usize) -> Self {
        let hidden = if kind == ScorerKind::Linear { 0 } else { hidden };
        Self { kind, feature_count, hidden, seed: 0, params: vec![0.0; param_count(kind, feature_count, hidden)] }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` per layer.
    pub fn init(kind: ScorerKind, feature_count: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(kind, feature_count, hidden);
        p.seed = seed;
        let mut rng = seed::rng(seed);
        let mut uniform = |bound: f64| rng.random_range(-bound..=bound);
        let f_bound = 1.0 / (feature_count.max(1) as f64).sqrt();
        match kind {
            ScorerKind::Linear => p.params.iter_mut().for_each(|w| *w = uniform(f_bound)),
            ScorerKind::OneHidden => {
                let h = p.hidden;
                let h_bound = 1.0 / (h.max(1) as f64).sqrt();
                let (first, second) = p.params.split_at_mut(h * feature_count + h);
                first.iter_mut().for_each(|w| *w = uniform(f_bound));
                second.iter_mut().for_each(|w| *w = uniform(h_bound));
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Zeroes every first-layer weight reading the given feature ids, so the
    /// score no longer depends on them.
    pub fn zero_inputs(&mut self, feature_ids: &[usize]) {
        let f = self.feature_count;
        let rows = if self.kind == ScorerKind::Linear { 1 } else { self.hidden };
        for &id in feature_ids.iter().filter(|&&id| id < f) {
            for k in 0..rows {
                self.params[k * f + id] = 0.0;
            }
        }
    }

    fn check_dims(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(Error::DimensionMismatch { expected: self.feature_count, got: x.len() });
        }
        Ok(())
    }

    /// Score of one feature vector.
    pub fn score_one(&self, x: &[f64]) -> Result<f64> {
        self.check_dims(x)?;
        Ok(self.score_unchecked(x))
    }

    fn score_unchecked(&self, x: &[f64]) -> f64 {
        match self.kind {
            ScorerKind::Linear => dot(&self.params, x),
            ScorerKind::OneHidden => {
                let (w, b, v, c) = self.hidden_parts();
                let f = self.feature_count;
                let mut out = c;
                for k in 0..self.hidden {
                    let pre = dot(&w[k * f..(k + 1) * f], x) + b[k];
                    if pre > 0.0 {
                        out += v[k] * pre;
                    }
                }
                out
            }
        }
    }

    /// Scores of a list of feature vectors.
    pub fn scores_of(&self, features: &[&[f64]]) -> Result<Vec<f64>> {
        features.iter().map(|x| self.score_one(x)).collect()
    }

    /// Score vector of a query, `h(x_q)`.
    pub fn scores(&self, query: &Query) -> Result<Vec<f64>> {
        self.scores_of(&query.features())
    }

    /// Adds `sum_d dscores[d] * d h(x_d) / d theta` into `grad`.
    pub fn backprop(&self, features: &[&[f64]], dscores: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(features.len(), dscores.len());
        debug_assert_eq!(grad.len(), self.params.len());
        match self.kind {
            ScorerKind::Linear => {
                for (x, &g) in features.iter().zip(dscores) {
                    if g != 0.0 {
                        for (acc, xi) in grad.iter_mut().zip(x.iter()) {
                            *acc += g * xi;
                        }
                    }
                }
            }
            ScorerKind::OneHidden => {
                let f = self.feature_count;
                let h = self.hidden;
                let (w, b, v, _) = self.hidden_parts();
                let (gw, rest) = grad.split_at_mut(h * f);
                let (gb, rest) = rest.split_at_mut(h);
                let (gv, gc) = rest.split_at_mut(h);
                for (x, &g) in features.iter().zip(dscores) {
                    if g == 0.0 {
                        continue;
                    }
                    gc[0] += g;
                    for k in 0..h {
                        let pre = dot(&w[k * f..(k + 1) * f], x) + b[k];
                        if pre > 0.0 {
                            gv[k] += g * pre;
                            let gk = g * v[k];
                            gb[k] += gk;
                            for (acc, xi) in gw[k * f..(k + 1) * f].iter_mut().zip(x.iter()) {
                                *acc += gk * xi;
                            }
                        }
                    }
                }
            }
        }
    }

    fn hidden_parts(&self) -> (&[f64], &[f64], &[f64], f64) {
        let f = self.feature_count;
        let h = self.hidden;
        let (w, rest) = self.params.split_at(h * f);
        let (b, rest) = rest.split_at(h);
        let (v, c) = rest.split_at(h);
        (w, b, v, c[0])
    }

    // -- model file ---------------------------------------------------------

    /// Writes the binary model file and a `<path>.json` metadata sidecar.
    ///
    /// Binary layout, little-endian: magic `FXPOMODL`, `u32` version, `u8`
    /// kind (0 linear, 1 one-hidden), `u32` F, `u32` H, `u64` seed, `u64`
    /// parameter count, then the parameters as `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&[match self.kind {
            ScorerKind::Linear => 0u8,
            ScorerKind::OneHidden => 1u8,
        }])?;
        w.write_all(&(self.feature_count as u32).to_le_bytes())?;
        w.write_all(&(self.hidden as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        let meta = serde_json::json!({
            "format": "fairexpo-model",
            "version": MODEL_VERSION,
            "kind": self.kind,
            "feature_count": self.feature_count,
            "hidden": self.hidden,
            "seed": self.seed,
            "parameter_count": self.params.len(),
        });
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => ScorerKind::Linear,
            1 => ScorerKind::OneHidden,
            k => return Err(Error::ModelFormat(format!("unknown scorer kind {k}"))),
        };
        let feature_count = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        if count != param_count(kind, feature_count, hidden) {
            return Err(Error::ModelFormat(format!("parameter count {count} does not match header")));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            params.push(f64::from_le_bytes(b));
        }
        Ok(Self { kind, feature_count, hidden, seed, params })
    }
}

const MODEL_MAGIC: &[u8; 8] = b"FXPOMODL";
const MODEL_VERSION: u32 = 1;

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn param_count(kind: ScorerKind, feature_count: usize, hidden: usize) -> usize {
    match kind {
        ScorerKind::Linear => feature_count,
        ScorerKind::OneHidden => hidden * feature_count + 2 * hidden + 1,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Plackett-Luce over a score vector

/// A sampled ranking with its log-probability and the probability of each
/// placement decision (top position first).
#[derive(Debug, Clone, PartialEq)]
pub struct RankingSample {
    pub ranking: Ranking,
    pub log_prob: f64,
    pub placement_probs: Vec<f64>,
}

/// `log(sum_{j >= i} exp(s_{order[j]}))` for every position `i`.
fn suffix_log_sums(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let n = order.len();
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut acc = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        let s = scores[order[i]];
        acc = if acc == f64::NEG_INFINITY {
            s
        } else {
            let (hi, lo) = if s > acc { (s, acc) } else { (acc, s) };
            hi + (lo - hi).exp().ln_1p()
        };
        out[i] = acc;
    }
    out
}

/// Exact log-probability of `ranking` under the Plackett-Luce model.
pub fn pl_log_prob(scores: &[f64], ranking: &Ranking) -> f64 {
    let order = ranking.order();
    let lse = suffix_log_sums(scores, order);
    order.iter().zip(&lse).map(|(&d, l)| scores[d] - l).sum()
}

/// Gradient of `log pi(ranking)` with respect to the score vector.
///
/// For item `k` at position `m`, `d log pi / d s_k = 1 - sum_{i <= m} p_i(k)`
/// where `p_i(k)` is the softmax probability of `k` among the items still
/// available at step `i`.
pub fn pl_grad_log_prob(scores: &[f64], ranking: &Ranking) -> Vec<f64> {
    let mut grad = vec![0.0; scores.len()];
    pl_grad_log_prob_into(scores, ranking, &mut grad);
    grad
}

/// As [`pl_grad_log_prob`], writing into `grad`. Returns `log pi(ranking)`.
pub fn pl_grad_log_prob_into(scores: &[f64], ranking: &Ranking, grad: &mut [f64]) -> f64 {
    let order = ranking.order();
    let lse = suffix_log_sums(scores, order);
    // c_m = sum_{i <= m} exp(lse_m - lse_i); every term is <= 1
    let mut c = 0.0;
    let mut log_prob = 0.0;
    for (m, &d) in order.iter().enumerate() {
        c = if m == 0 { 1.0 } else { 1.0 + c * (lse[m] - lse[m - 1]).exp() };
        let p = (scores[d] - lse[m]).exp();
        grad[d] = 1.0 - p * c;
        log_prob += scores[d] - lse[m];
    }
    log_prob
}

/// Draws a ranking by sequential sampling without replacement.
pub fn pl_sample<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> RankingSample {
    let n = scores.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut order = Vec::with_capacity(n);
    let mut placement_probs = Vec::with_capacity(n);
    while !remaining.is_empty() {
        let mut total: f64 = remaining.iter().map(|&d| weights[d]).sum();
        if !(total > 1e-280) {
            // rescale against the largest remaining score
            let local = remaining.iter().map(|&d| scores[d]).fold(f64::NEG_INFINITY, f64::max);
            for &d in &remaining {
                weights[d] = (scores[d] - local).exp();
            }
            total = remaining.iter().map(|&d| weights[d]).sum();
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (k, &d) in remaining.iter().enumerate() {
            if u < weights[d] {
                pick = k;
                break;
            }
            u -= weights[d];
        }
        // never select a zero-weight item through rounding
        while weights[remaining[pick]] == 0.0 && pick > 0 {
            pick -= 1;
        }
        let d = remaining.remove(pick);
        placement_probs.push(weights[d] / total);
        order.push(d);
    }
    let ranking = Ranking::from_order(order).expect("sampled order is a permutation");
    let log_prob = pl_log_prob(scores, &ranking);
    RankingSample { ranking, log_prob, placement_probs }
}

/// The mode of the Plackett-Luce distribution: descending score, ties broken
/// by item index.
pub fn argmax_ranking(scores: &[f64]) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ranking::from_order(order).expect("sorted indices form a permutation")
}

/// Shannon entropy of `softmax(scores)` and its gradient with respect to the
/// scores, `dH/ds_k = -p_k (log p_k + H)`.
pub fn softmax_entropy(scores: &[f64]) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + z.ln();
    let log_p: Vec<f64> = scores.iter().map(|s| s - log_z).collect();
    let entropy: f64 = -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>();
    let grad = log_p.iter().map(|lp| -lp.exp() * (lp + entropy)).collect();
    (entropy, grad)
}

/// Every ranking of `n` items, for exact enumeration on small queries.
pub fn all_rankings(n: usize) -> Vec<Ranking> {
    (0..n).permutations(n).map(|order| Ranking::from_order(order).expect("permutation")).collect()
}

// ---------------------------------------------------------------------------
// Parameter-level wrappers

pub fn log_prob(params: &ScorerParams, query: &Query, ranking: &Ranking) -> Result<f64> {
    check_len(query, ranking)?;
    Ok(pl_log_prob(&params.scores(query)?, ranking))
}

pub fn sample<R: Rng + ?Sized>(params: &ScorerParams, query: &Query, rng: &mut R) -> Result<RankingSample> {
    Ok(pl_sample(&params.scores(query)?, rng))
}

/// `d log pi(ranking) / d theta`.
pub fn grad_log_prob(params: &ScorerParams, query: &Query, ranking: &Ranking) -> Result<Vec<f64>> {
    check_len(query, ranking)?;
    let scores = params.scores(query)?;
    let dscores = pl_grad_log_prob(&scores, ranking);
    let mut grad = vec![0.0; params.len()];
    params.backprop(&query.features(), &dscores, &mut grad);
    Ok(grad)
}

pub fn argmax(params: &ScorerParams, query: &Query) -> Result<Ranking> {
    Ok(argmax_ranking(&params.scores(query)?))
}

/// Entropy of the top-level softmax and its gradient with respect to theta.
pub fn entropy(params: &ScorerParams, query: &Query) -> Result<(f64, Vec<f64>)> {
    let scores = params.scores(query)?;
    let (h, dscores) = softmax_entropy(&scores);
    let mut grad = vec![0.0; params.len()];
    params.backprop(&query.features(), &dscores, &mut grad);
    Ok((h, grad))
}

fn check_len(query: &Query, ranking: &Ranking) -> Result<()> {
    if ranking.len() != query.len() {
        return Err(Error::InvalidRanking(format!("ranking has {} items, query has {}", ranking.len(), query.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Item;
    use std::collections::HashMap;

    fn query(features: Vec<Vec<f64>>) -> Query {
        Query {
            id: "q".into(),
            items: features.into_iter().map(|features| Item { features, relevance: 0, group: 0 }).collect(),
        }
    }

    fn random_query(n: usize, f: usize, seed: u64) -> Query {
        let mut rng = seed::rng(seed);
        query((0..n).map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn linear_scores() {
        let q = query(vec![vec![1.0, 2.0], vec![3.0, -1.0]]);
        assert_eq!(ScorerParams::zeros(ScorerKind::Linear, 2, 0).scores(&q).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ScorerParams::linear(vec![1.0, 0.0]).scores(&q).unwrap(), vec![1.0, 3.0]);
        assert!(matches!(
            ScorerParams::linear(vec![1.0]).scores(&q),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn dead_hidden_units_leave_bias() {
        let mut p = ScorerParams::zeros(ScorerKind::OneHidden, 2, 3);
        // W = 0, b = -1 (all pre-activations negative), v = 5, c = 0.25
        for k in 0..3 {
            p.params[6 + k] = -1.0;
            p.params[9 + k] = 5.0;
        }
        p.params[12] = 0.25;
        let q = query(vec![vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(p.scores(&q).unwrap(), vec![0.25, 0.25]);
    }

    #[test]
    fn uniform_scores_give_uniform_rankings() {
        for r in all_rankings(3) {
            assert!((pl_log_prob(&[0.3, 0.3, 0.3], &r) - (1.0f64 / 6.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_item_probability() {
        let s = [2f64.ln(), 0.0];
        let r = Ranking::identity(2);
        assert!((pl_log_prob(&s, &r) - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        let g = pl_grad_log_prob(&s, &r);
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[1] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = seed::rng(3);
        for n in 1..=5 {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let total: f64 = all_rankings(n).iter().map(|r| pl_log_prob(&s, r).exp()).sum();
            assert!((total - 1.0).abs() < 1e-10, "n={n} total={total}");
        }
    }

    #[test]
    fn shift_invariance() {
        let s = [0.2, -1.3, 2.0, 0.7];
        let shifted: Vec<f64> = s.iter().map(|x| x + 17.5).collect();
        for r in all_rankings(4) {
            assert!((pl_log_prob(&s, &r) - pl_log_prob(&shifted, &r)).abs() < 1e-12);
        }
        assert_eq!(argmax_ranking(&s), argmax_ranking(&shifted));
        assert!((softmax_entropy(&s).0 - softmax_entropy(&shifted).0).abs() < 1e-12);
    }

    #[test]
    fn single_item_sample() {
        let mut rng = seed::rng(0);
        let s = pl_sample(&[4.2], &mut rng);
        assert_eq!(s.ranking.order(), &[0]);
        assert_eq!(s.log_prob, 0.0);
    }

    #[test]
    fn sample_log_prob_matches_exact() {
        let mut rng = seed::rng(9);
        let scores = [0.5, -0.2, 1.5, 0.0, -2.0];
        for _ in 0..100 {
            let s = pl_sample(&scores, &mut rng);
            assert!((s.log_prob - pl_log_prob(&scores, &s.ranking)).abs() < 1e-12);
            let from_steps: f64 = s.placement_probs.iter().map(|p| p.ln()).sum();
            assert!((from_steps - s.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn two_item_first_place_frequency() {
        let mut rng = seed::rng(21);
        let s = [2f64.ln(), 0.0];
        let n = 100_000;
        let first = (0..n).filter(|_| pl_sample(&s, &mut rng).ranking.order()[0] == 0).count();
        let freq = first as f64 / n as f64;
        assert!((0.66..=0.674).contains(&freq), "freq {freq}");
    }

    #[test]
    fn large_scale_concentrates_on_argmax() {
        let mut rng = seed::rng(4);
        let base = [0.3, -0.1, 0.9, 0.5];
        let scaled: Vec<f64> = base.iter().map(|x| x * 50.0).collect();
        let mode = argmax_ranking(&base);
        let hits = (0..10_000).filter(|_| pl_sample(&scaled, &mut rng).ranking == mode).count();
        assert!(hits as f64 / 10_000.0 > 0.99);
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let mut rng = seed::rng(5);
        let scores = [1000.0, -1000.0, 0.0, 999.0];
        let s = pl_sample(&scores, &mut rng);
        assert!(s.log_prob.is_finite());
        let g = pl_grad_log_prob(&scores, &s.ranking);
        assert!(g.iter().all(|x| x.is_finite()));
        assert!(softmax_entropy(&scores).0.is_finite());
    }

    #[test]
    fn sample_frequencies_match_probabilities() {
        let mut rng = seed::rng(77);
        let scores = [0.4, -0.3, 1.1, 0.0];
        let n = 100_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            *counts.entry(pl_sample(&scores, &mut rng).ranking.order().to_vec()).or_default() += 1;
        }
        let worst = all_rankings(4)
            .iter()
            .map(|r| {
                let freq = *counts.get(r.order()).unwrap_or(&0) as f64 / n as f64;
                (freq - pl_log_prob(&scores, r).exp()).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "max deviation {worst}");
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_ranking(&[0.1, 0.9, 0.5]).order(), &[1, 2, 0]);
        assert_eq!(argmax_ranking(&[1.0, 1.0, 1.0]).order(), &[0, 1, 2]);
    }

    #[test]
    fn argmax_is_most_probable() {
        let mut rng = seed::rng(8);
        for n in 2..=5 {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let best = pl_log_prob(&s, &argmax_ranking(&s));
            for r in all_rankings(n) {
                assert!(pl_log_prob(&s, &r) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn expected_score_gradient_is_zero() {
        let mut rng = seed::rng(12);
        for n in 2..=5 {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut acc = vec![0.0; n];
            for r in all_rankings(n) {
                let p = pl_log_prob(&s, &r).exp();
                for (a, g) in acc.iter_mut().zip(pl_grad_log_prob(&s, &r)) {
                    *a += p * g;
                }
            }
            assert!(acc.iter().all(|a| a.abs() < 1e-10), "{acc:?}");
        }
    }

    #[test]
    fn uniform_gradient_sums_to_zero() {
        // each placement step contributes a zero-sum vector
        for r in all_rankings(4) {
            let g = pl_grad_log_prob(&[0.0; 4], &r);
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let s = [0.3, -0.8, 1.2, 0.1, 0.5];
        let r = Ranking::from_order(vec![2, 0, 4, 3, 1]).unwrap();
        let g = pl_grad_log_prob(&s, &r);
        let h = 1e-5;
        for k in 0..5 {
            let mut plus = s;
            let mut minus = s;
            plus[k] += h;
            minus[k] -= h;
            let fd = (pl_log_prob(&plus, &r) - pl_log_prob(&minus, &r)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "k={k} fd={fd} analytic={}", g[k]);
        }
    }

    fn fd_check(params: &ScorerParams, f: impl Fn(&ScorerParams) -> f64, analytic: &[f64]) {
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.params[i] += h;
            minus.params[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!(rel_close(fd, a, 1e-4), "param {i}: fd={fd} analytic={a}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let q = random_query(5, 4, 31);
        let r = Ranking::from_order(vec![3, 1, 4, 0, 2]).unwrap();
        for kind in [ScorerKind::Linear, ScorerKind::OneHidden] {
            let p = ScorerParams::init(kind, 4, 6, 99);
            let g = grad_log_prob(&p, &q, &r).unwrap();
            fd_check(&p, |pp| log_prob(pp, &q, &r).unwrap(), &g);
            let (_, ge) = entropy(&p, &q).unwrap();
            fd_check(&p, |pp| entropy(pp, &q).unwrap().0, &ge);
        }
    }

    #[test]
    fn entropy_limits() {
        let (h, _) = softmax_entropy(&[0.0; 7]);
        assert!((h - 7f64.ln()).abs() < 1e-12);
        let (h, _) = softmax_entropy(&[100.0, 0.0, 0.0]);
        assert!(h < 1e-40);
    }

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let p = ScorerParams::init(ScorerKind::OneHidden, 3, 4, 17);
        p.save(&path).unwrap();
        assert_eq!(ScorerParams::load(&path).unwrap(), p);
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("m.bin.json")).unwrap()).unwrap();
        assert_eq!(meta["hidden"], 4);
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(ScorerParams::load(&path).is_err());
    }
}
