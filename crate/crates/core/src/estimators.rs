//! Utility, merit, exposure and disparity: true values from full
//! information and estimators from click logs.
//!
//! Disparity between groups `i` and `j` is the bilinear quantity
//! `M(G_j) * Expo(G_i) - M(G_i) * Expo(G_j)`, zero exactly when exposure is
//! proportional to merit. The IPS and noise-corrected estimators plug in
//! inverse-propensity-weighted merits and are unbiased (the latter up to the
//! factor `eps_plus - eps_minus`). The ratio-based estimators are kept as
//! comparators: they are biased and undefined when a group has no clicks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clicksim::{ClickRecord, ExaminationModel};
use crate::policy::{all_rankings, pl_log_prob, pl_sample};
use crate::{Error, Ranking, Result};

/// Largest query for which policy expectations are enumerated over all `n!`
/// rankings instead of sampled.
pub const RANKING_ENUMERATION_CAP: usize = 6;

/// Position weight `f(rank)` of an additive ranking metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricWeight {
    /// `1 / log2(1 + k)`
    Dcg,
    /// `-k`
    AvgRank,
}

impl MetricWeight {
    pub fn weight(self, rank: usize) -> f64 {
        match self {
            MetricWeight::Dcg => 1.0 / (1.0 + rank as f64).log2(),
            MetricWeight::AvgRank => -(rank as f64),
        }
    }

    pub fn table(self, n: usize) -> Vec<f64> {
        (1..=n).map(|k| self.weight(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorKind {
    True,
    Ips,
    NaiveRatio,
    Amortized,
    NoiseCorrected,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::True => "TRUE",
            EstimatorKind::Ips => "IPS",
            EstimatorKind::NaiveRatio => "NAIVE_RATIO",
            EstimatorKind::Amortized => "AMORTIZED",
            EstimatorKind::NoiseCorrected => "NOISE_CORRECTED",
        }
    }
}

/// A disparity value tagged with the group pair and how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityEstimate {
    pub value: f64,
    pub pair: (usize, usize),
    pub kind: EstimatorKind,
}

// ---------------------------------------------------------------------------
// Utility

/// `sum_d f(rank(d)) * rel_d`.
pub fn delta_true(ranking: &Ranking, rel: &[u8], weight: MetricWeight) -> f64 {
    rel.iter().enumerate().filter(|(_, &r)| r == 1).map(|(d, _)| weight.weight(ranking.rank_of(d))).sum()
}

fn check_propensities(record: &ClickRecord) -> Result<()> {
    for (item, &p) in record.propensities.iter().enumerate() {
        if !(p > 0.0) {
            return Err(Error::NonPositivePropensity { item, value: p });
        }
    }
    Ok(())
}

/// IPS utility of a new ranking from a logged impression:
/// `sum_{d clicked} f(rank(d)) / p_d`.
pub fn delta_ips(ranking: &Ranking, record: &ClickRecord, weight: MetricWeight) -> Result<f64> {
    check_propensities(record)?;
    Ok(record
        .clicks
        .iter()
        .zip(&record.propensities)
        .enumerate()
        .filter(|(_, (&c, _))| c == 1)
        .map(|(d, (_, &p))| weight.weight(ranking.rank_of(d)) / p)
        .sum())
}

// ---------------------------------------------------------------------------
// Exposure

/// Per-item exposure of a deterministic ranking: item `d` gets `v_{rank(d)}`.
pub fn exposure_of_ranking(ranking: &Ranking, exam: &ExaminationModel) -> Vec<f64> {
    ranking.ranks().iter().map(|&k| exam.examination(k)).collect()
}

/// Sum of per-item values over the members of `group`.
pub fn group_sum(values: &[f64], groups: &[usize], group: usize) -> f64 {
    values.iter().zip(groups).filter(|(_, &g)| g == group).map(|(v, _)| v).sum()
}

/// Exposure of `group` under a deterministic ranking.
pub fn group_exposure(ranking: &Ranking, groups: &[usize], group: usize, exam: &ExaminationModel) -> f64 {
    groups.iter().enumerate().filter(|(_, &g)| g == group).map(|(d, _)| exam.examination(ranking.rank_of(d))).sum()
}

/// Monte-Carlo exposure of `group`: the mean over sampled rankings.
pub fn group_exposure_of_samples(samples: &[Ranking], groups: &[usize], group: usize, exam: &ExaminationModel) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|r| group_exposure(r, groups, group, exam)).sum::<f64>() / samples.len() as f64
}

/// Expected per-item exposure under the Plackett-Luce policy with `scores`,
/// by enumerating all rankings. Errors above [`RANKING_ENUMERATION_CAP`].
pub fn expected_item_exposure_exact(scores: &[f64], exam: &ExaminationModel) -> Result<Vec<f64>> {
    let n = scores.len();
    if n > RANKING_ENUMERATION_CAP {
        return Err(Error::Domain(format!("{n} items exceed the enumeration cap {RANKING_ENUMERATION_CAP}")));
    }
    let mut out = vec![0.0; n];
    for r in all_rankings(n) {
        let p = pl_log_prob(scores, &r).exp();
        for (o, e) in out.iter_mut().zip(exposure_of_ranking(&r, exam)) {
            *o += p * e;
        }
    }
    Ok(out)
}

/// Expected exposure of `group` under the Plackett-Luce policy with `scores`:
/// exact when the query is within the enumeration cap, otherwise the mean over
/// `samples` draws from `rng`.
pub fn policy_group_exposure<R: Rng + ?Sized>(
    scores: &[f64],
    groups: &[usize],
    group: usize,
    exam: &ExaminationModel,
    samples: usize,
    rng: &mut R,
) -> f64 {
    if scores.len() <= RANKING_ENUMERATION_CAP {
        let per_item = expected_item_exposure_exact(scores, exam).expect("within cap");
        return group_sum(&per_item, groups, group);
    }
    let drawn: Vec<Ranking> = (0..samples.max(1)).map(|_| pl_sample(scores, rng).ranking).collect();
    group_exposure_of_samples(&drawn, groups, group, exam)
}

// ---------------------------------------------------------------------------
// Merit

/// Number of relevant members of `group`.
pub fn merit_true(rel: &[u8], groups: &[usize], group: usize) -> f64 {
    rel.iter().zip(groups).filter(|(&r, &g)| g == group && r == 1).count() as f64
}

/// IPS merit of `group`: `sum_{d in group} c_d / p_d`.
pub fn merit_ips(record: &ClickRecord, groups: &[usize], group: usize) -> Result<f64> {
    check_propensities(record)?;
    Ok(record
        .clicks
        .iter()
        .zip(&record.propensities)
        .zip(groups)
        .filter(|((&c, _), &g)| g == group && c == 1)
        .map(|((_, &p), _)| 1.0 / p)
        .sum())
}

/// Click count of `group`, i.e. merit with every propensity treated as 1.
pub fn merit_unweighted(record: &ClickRecord, groups: &[usize], group: usize) -> f64 {
    record.clicks.iter().zip(groups).filter(|(&c, &g)| g == group && c == 1).count() as f64
}

// ---------------------------------------------------------------------------
// Disparity

/// `M_j * Expo_i - M_i * Expo_j`.
pub fn bilinear_disparity(merit_i: f64, merit_j: f64, exposure_i: f64, exposure_j: f64) -> f64 {
    merit_j * exposure_i - merit_i * exposure_j
}

/// True per-query disparity from relevance labels.
pub fn disparity_true(
    rel: &[u8],
    groups: &[usize],
    pair: (usize, usize),
    exposure_i: f64,
    exposure_j: f64,
) -> DisparityEstimate {
    let (i, j) = pair;
    DisparityEstimate {
        value: bilinear_disparity(merit_true(rel, groups, i), merit_true(rel, groups, j), exposure_i, exposure_j),
        pair,
        kind: EstimatorKind::True,
    }
}

/// Unbiased per-query disparity with IPS merits.
pub fn disparity_ips(
    record: &ClickRecord,
    groups: &[usize],
    pair: (usize, usize),
    exposure_i: f64,
    exposure_j: f64,
) -> Result<DisparityEstimate> {
    let (i, j) = pair;
    let m_i = merit_ips(record, groups, i)?;
    let m_j = merit_ips(record, groups, j)?;
    Ok(DisparityEstimate {
        value: bilinear_disparity(m_i, m_j, exposure_i, exposure_j),
        pair,
        kind: EstimatorKind::Ips,
    })
}

/// Noise-corrected IPS disparity: the IPS value minus
/// `eps_minus * (|G_j| Expo_i - |G_i| Expo_j)`.
pub fn disparity_noise_corrected(
    record: &ClickRecord,
    groups: &[usize],
    pair: (usize, usize),
    exposure_i: f64,
    exposure_j: f64,
    eps_minus: f64,
) -> Result<DisparityEstimate> {
    if !(0.0..1.0).contains(&eps_minus) {
        return Err(Error::Domain(format!("eps_minus must lie in [0, 1), got {eps_minus}")));
    }
    let ips = disparity_ips(record, groups, pair, exposure_i, exposure_j)?;
    let size = |g: usize| groups.iter().filter(|&&x| x == g).count() as f64;
    let correction = noise_correction(size(pair.0), size(pair.1), exposure_i, exposure_j, eps_minus);
    Ok(DisparityEstimate { value: ips.value - correction, pair, kind: EstimatorKind::NoiseCorrected })
}

/// `eps_minus * (|G_j| Expo_i - |G_i| Expo_j)`.
pub fn noise_correction(size_i: f64, size_j: f64, exposure_i: f64, exposure_j: f64, eps_minus: f64) -> f64 {
    eps_minus * (size_j * exposure_i - size_i * exposure_j)
}

/// Per-query ratio comparator `Expo_i / M_i - Expo_j / M_j` with IPS merits.
/// Undefined (an error) when either group has zero estimated merit.
pub fn disparity_naive_ratio(
    record: &ClickRecord,
    groups: &[usize],
    pair: (usize, usize),
    exposure_i: f64,
    exposure_j: f64,
) -> Result<DisparityEstimate> {
    let (i, j) = pair;
    let m_i = merit_ips(record, groups, i)?;
    let m_j = merit_ips(record, groups, j)?;
    if m_i == 0.0 || m_j == 0.0 {
        return Err(Error::UndefinedEstimate(format!(
            "ratio disparity needs clicks in both groups (merits {m_i}, {m_j})"
        )));
    }
    Ok(DisparityEstimate { value: exposure_i / m_i - exposure_j / m_j, pair, kind: EstimatorKind::NaiveRatio })
}

/// Per-query inputs of the amortized ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupTotals {
    pub merit_i: f64,
    pub merit_j: f64,
    pub exposure_i: f64,
    pub exposure_j: f64,
}

/// Amortized comparator `sum Expo_i / sum M_i - sum Expo_j / sum M_j` over a
/// dataset. Consistent but biased when the merits are estimates.
pub fn disparity_amortized(per_query: &[GroupTotals], pair: (usize, usize)) -> Result<DisparityEstimate> {
    let (mut ei, mut ej, mut mi, mut mj) = (0.0, 0.0, 0.0, 0.0);
    for t in per_query {
        ei += t.exposure_i;
        ej += t.exposure_j;
        mi += t.merit_i;
        mj += t.merit_j;
    }
    if mi == 0.0 || mj == 0.0 {
        return Err(Error::UndefinedEstimate(format!("amortized disparity needs positive summed merit ({mi}, {mj})")));
    }
    Ok(DisparityEstimate { value: ei / mi - ej / mj, pair, kind: EstimatorKind::Amortized })
}

/// Amortized comparator from click records with IPS merits.
pub fn disparity_amortized_ips(
    records: &[(&ClickRecord, &[usize], f64, f64)],
    pair: (usize, usize),
) -> Result<DisparityEstimate> {
    let totals = records
        .iter()
        .map(|&(rec, groups, ei, ej)| {
            Ok(GroupTotals {
                merit_i: merit_ips(rec, groups, pair.0)?,
                merit_j: merit_ips(rec, groups, pair.1)?,
                exposure_i: ei,
                exposure_j: ej,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    disparity_amortized(&totals, pair)
}

/// Mean of per-query estimates, keeping the kind. Mixing kinds is an error.
pub fn aggregate(estimates: &[DisparityEstimate]) -> Result<DisparityEstimate> {
    let first = estimates.first().ok_or_else(|| Error::Domain("no estimates to aggregate".into()))?;
    if estimates.iter().any(|e| e.kind != first.kind || e.pair != first.pair) {
        return Err(Error::Domain("cannot aggregate estimates of different kinds or pairs".into()));
    }
    let value = estimates.iter().map(|e| e.value).sum::<f64>() / estimates.len() as f64;
    Ok(DisparityEstimate { value, ..*first })
}

/// Unordered group pairs `(i, j)` with `i < j`.
pub fn group_pairs(group_count: usize) -> Vec<(usize, usize)> {
    (0..group_count).flat_map(|i| (i + 1..group_count).map(move |j| (i, j))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn record(clicks: Vec<u8>, propensities: Vec<f64>) -> ClickRecord {
        let n = clicks.len();
        ClickRecord { qid: "q".into(), logged_ranking: Ranking::identity(n), clicks, propensities }
    }

    #[test]
    fn dcg_weights() {
        assert_eq!(MetricWeight::Dcg.weight(1), 1.0);
        assert_eq!(MetricWeight::AvgRank.weight(4), -4.0);
        let t = MetricWeight::Dcg.table(10);
        assert!(t.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn delta_true_examples() {
        let r = Ranking::identity(3);
        assert_eq!(delta_true(&r, &[1, 0, 0], MetricWeight::Dcg), 1.0);
        assert_eq!(delta_true(&r, &[0, 0, 0], MetricWeight::Dcg), 0.0);
        assert!((delta_true(&r, &[1, 0, 1], MetricWeight::Dcg) - 1.5).abs() < 1e-15);
        assert_eq!(delta_true(&r, &[1, 0, 1], MetricWeight::AvgRank), -4.0);
    }

    #[test]
    fn delta_ips_examples() {
        let r = Ranking::identity(2);
        assert_eq!(delta_ips(&r, &record(vec![0, 0], vec![1.0, 0.5]), MetricWeight::Dcg).unwrap(), 0.0);
        assert_eq!(delta_ips(&r, &record(vec![1, 0], vec![0.5, 1.0]), MetricWeight::Dcg).unwrap(), 2.0);
        let v = delta_ips(&r, &record(vec![1, 1], vec![1.0, 0.5]), MetricWeight::Dcg).unwrap();
        assert!((v - (1.0 + 2.0 / 3f64.log2())).abs() < 1e-12);
        assert!((v - 2.2619).abs() < 1e-4);
        assert!(matches!(
            delta_ips(&r, &record(vec![1, 0], vec![0.0, 1.0]), MetricWeight::Dcg),
            Err(Error::NonPositivePropensity { item: 0, .. })
        ));
    }

    #[test]
    fn exposure_examples() {
        let r = Ranking::identity(3);
        let e = exposure_of_ranking(&r, &ExaminationModel::position_bias(1.0));
        assert_eq!(e[0], 1.0);
        assert_eq!(e[1], 0.5);
        assert!((e[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!(exposure_of_ranking(&r, &ExaminationModel::position_bias(0.0)).iter().all(|&x| x == 1.0));
        assert_eq!(exposure_of_ranking(&r, &ExaminationModel::position_bias(2.0))[1], 0.25);

        let groups = [0, 1, 1];
        let exam = ExaminationModel::position_bias(1.0);
        assert_eq!(group_exposure(&r, &groups, 0, &exam), 1.0);
        assert_eq!(group_exposure(&r, &groups, 5, &exam), 0.0);
    }

    #[test]
    fn uniform_two_item_policy_exposure() {
        let exam = ExaminationModel::position_bias(1.0);
        let mut rng = seed::rng(0);
        let e = policy_group_exposure(&[0.0, 0.0], &[0, 1], 0, &exam, 1, &mut rng);
        assert!((e - 0.75).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_exposure_converges() {
        let exam = ExaminationModel::position_bias(1.0);
        let scores = [0.8, -0.4, 0.1, 1.5, -1.0, 0.3];
        let groups = [0, 1, 0, 1, 1, 0];
        let exact = expected_item_exposure_exact(&scores, &exam).unwrap();
        let mut rng = seed::rng(10);
        let samples: Vec<Ranking> = (0..10_000).map(|_| pl_sample(&scores, &mut rng).ranking).collect();
        for g in 0..2 {
            let mc = group_exposure_of_samples(&samples, &groups, g, &exam);
            assert!((mc - group_sum(&exact, &groups, g)).abs() < 0.01);
        }
    }

    #[test]
    fn merit_examples() {
        let groups = [0, 0, 0, 1];
        assert_eq!(merit_true(&[1, 1, 1, 0], &groups, 0), 3.0);
        let rec = record(vec![1, 0, 0, 0], vec![0.25, 1.0, 1.0, 1.0]);
        assert_eq!(merit_ips(&rec, &groups, 0).unwrap(), 4.0);
        assert_eq!(merit_ips(&rec, &groups, 1).unwrap(), 0.0);
    }

    #[test]
    fn disparity_examples() {
        assert!((bilinear_disparity(2.0, 1.0, 0.8, 0.6) + 0.4).abs() < 1e-15);
        assert_eq!(bilinear_disparity(0.0, 0.0, 0.8, 0.6), 0.0);
        assert_eq!(bilinear_disparity(3.0, 3.0, 1.5, 1.0), 1.5);
        // proportional allocation
        assert_eq!(bilinear_disparity(2.0, 4.0, 1.0, 2.0), 0.0);
        // equal merits: sign follows the exposure gap
        assert!(bilinear_disparity(2.0, 2.0, 1.2, 0.7) > 0.0);
        assert!(bilinear_disparity(2.0, 2.0, 0.7, 1.2) < 0.0);
    }

    #[test]
    fn ips_disparity_diagonal_and_antisymmetry() {
        let groups = [0, 1, 0, 1];
        let rec = record(vec![1, 1, 0, 1], vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
        let d = disparity_ips(&rec, &groups, (0, 1), 1.2, 0.9).unwrap();
        let r = disparity_ips(&rec, &groups, (1, 0), 0.9, 1.2).unwrap();
        assert_eq!(d.value, -r.value);
        assert_eq!(disparity_ips(&rec, &groups, (0, 0), 1.2, 1.2).unwrap().value, 0.0);
    }

    #[test]
    fn noise_correction_examples() {
        let groups = [0, 1, 0, 1];
        let rec = record(vec![1, 1, 0, 1], vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
        let ips = disparity_ips(&rec, &groups, (0, 1), 1.2, 0.9).unwrap();
        let zero = disparity_noise_corrected(&rec, &groups, (0, 1), 1.2, 0.9, 0.0).unwrap();
        assert_eq!(ips.value, zero.value);
        // equal sizes and exposures cancel the correction
        let even = disparity_noise_corrected(&rec, &groups, (0, 1), 1.0, 1.0, 0.3).unwrap();
        assert_eq!(even.value, disparity_ips(&rec, &groups, (0, 1), 1.0, 1.0).unwrap().value);
        assert!(disparity_noise_corrected(&rec, &groups, (0, 1), 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn ratio_estimators() {
        let groups = [0, 1];
        let rec = record(vec![1, 1], vec![1.0, 1.0]);
        assert_eq!(disparity_naive_ratio(&rec, &groups, (0, 1), 0.7, 0.7).unwrap().value, 0.0);
        let none = record(vec![0, 1], vec![1.0, 1.0]);
        assert!(matches!(disparity_naive_ratio(&none, &groups, (0, 1), 0.7, 0.7), Err(Error::UndefinedEstimate(_))));

        // a single query reduces to the per-query ratio
        let rec = record(vec![1, 1, 1], vec![1.0, 0.5, 0.25]);
        let g3 = [0, 1, 1];
        let naive = disparity_naive_ratio(&rec, &g3, (0, 1), 1.0, 0.8).unwrap();
        let amort = disparity_amortized_ips(&[(&rec, &g3, 1.0, 0.8)], (0, 1)).unwrap();
        assert!((naive.value - amort.value).abs() < 1e-15);
        assert_eq!(amort.kind, EstimatorKind::Amortized);

        let prop = [
            GroupTotals { merit_i: 1.0, merit_j: 2.0, exposure_i: 0.5, exposure_j: 1.0 },
            GroupTotals { merit_i: 3.0, merit_j: 1.0, exposure_i: 1.5, exposure_j: 0.5 },
        ];
        assert!(disparity_amortized(&prop, (0, 1)).unwrap().value.abs() < 1e-15);
        let zero = [GroupTotals { merit_i: 0.0, merit_j: 2.0, exposure_i: 0.5, exposure_j: 1.0 }];
        assert!(disparity_amortized(&zero, (0, 1)).is_err());
    }

    #[test]
    fn aggregation_refuses_mixed_kinds() {
        let a = DisparityEstimate { value: 1.0, pair: (0, 1), kind: EstimatorKind::Ips };
        let b = DisparityEstimate { value: 3.0, pair: (0, 1), kind: EstimatorKind::Ips };
        assert_eq!(aggregate(&[a, b]).unwrap().value, 2.0);
        let c = DisparityEstimate { kind: EstimatorKind::True, ..b };
        assert!(aggregate(&[a, c]).is_err());
    }

    #[test]
    fn pairs_are_unordered() {
        assert_eq!(group_pairs(2), vec![(0, 1)]);
        assert_eq!(group_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(group_pairs(5).len(), 10);
    }
}
