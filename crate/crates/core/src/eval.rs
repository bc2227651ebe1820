//! Full-information evaluation: average DCG, true disparities, trade-off
//! frontiers and estimator audits.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::clicksim::{ClickRecord, ExaminationModel};
use crate::dataset::Query;
use crate::estimators::{self, delta_true, group_pairs, DisparityEstimate, EstimatorKind, GroupTotals, MetricWeight};
use crate::policy::{argmax_ranking, pl_sample, ScorerParams};
use crate::trainer::SweepResult;
use crate::{seed, Error, Ranking, Result};

/// How rankings are drawn from the evaluated policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// The highest-probability ranking.
    Argmax,
    /// The mean over this many sampled rankings.
    Stochastic { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: (usize, usize),
    /// Mean over queries of the true per-query disparity.
    pub disparity: f64,
    pub disparity_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub query_count: usize,
    /// Un-normalized DCG averaged over queries.
    pub avg_dcg: f64,
    /// Mean rank of the relevant items, averaged over queries that have any.
    pub avg_rank: f64,
    pub pairs: Vec<PairReport>,
    /// Sum of squared disparities over all pairs.
    pub disparity_sq: f64,
    pub exposure_totals: Vec<f64>,
    pub merit_totals: Vec<f64>,
}

struct QueryOutcome {
    dcg: f64,
    mean_relevant_rank: Option<f64>,
    exposure: Vec<f64>,
}

fn outcome_of(rankings: &[Ranking], query: &Query, group_count: usize, exam: &ExaminationModel) -> QueryOutcome {
    let rel = query.relevances();
    let groups = query.groups();
    let m = rankings.len() as f64;
    let relevant = query.relevant_count();
    let mut dcg = 0.0;
    let mut rank_sum = 0.0;
    let mut exposure = vec![0.0; group_count];
    for r in rankings {
        dcg += delta_true(r, &rel, MetricWeight::Dcg) / m;
        rank_sum -= delta_true(r, &rel, MetricWeight::AvgRank) / m;
        for (d, &k) in r.ranks().iter().enumerate() {
            exposure[groups[d]] += exam.examination(k) / m;
        }
    }
    let mean_relevant_rank = (relevant > 0).then(|| rank_sum / relevant as f64);
    QueryOutcome { dcg, mean_relevant_rank, exposure }
}

/// Evaluates a policy on queries with true relevances. Stochastic mode draws
/// from per-query substreams of `seed`, so results do not depend on order.
pub fn evaluate(
    params: &ScorerParams,
    queries: &[Query],
    group_count: usize,
    exam: &ExaminationModel,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Domain("no queries to evaluate".into()));
    }
    if let EvalMode::Stochastic { samples: 0 } = mode {
        return Err(Error::Domain("stochastic evaluation needs at least one sample".into()));
    }
    let pairs = group_pairs(group_count);
    let nq = queries.len() as f64;
    let mut avg_dcg = 0.0;
    let (mut rank_sum, mut ranked) = (0.0, 0usize);
    let mut disparity = vec![0.0; pairs.len()];
    let mut exposure_totals = vec![0.0; group_count];
    let mut merit_totals = vec![0.0; group_count];
    for (qi, q) in queries.iter().enumerate() {
        let scores = params.scores(q)?;
        let rankings = match mode {
            EvalMode::Argmax => vec![argmax_ranking(&scores)],
            EvalMode::Stochastic { samples } => {
                let mut rng = seed::substream(seed, qi as u64);
                (0..samples).map(|_| pl_sample(&scores, &mut rng).ranking).collect()
            }
        };
        let out = outcome_of(&rankings, q, group_count, exam);
        avg_dcg += out.dcg / nq;
        if let Some(r) = out.mean_relevant_rank {
            rank_sum += r;
            ranked += 1;
        }
        let rel = q.relevances();
        let groups = q.groups();
        let merits: Vec<f64> = (0..group_count).map(|g| estimators::merit_true(&rel, &groups, g)).collect();
        for (acc, &(i, j)) in disparity.iter_mut().zip(&pairs) {
            *acc += estimators::bilinear_disparity(merits[i], merits[j], out.exposure[i], out.exposure[j]) / nq;
        }
        for g in 0..group_count {
            exposure_totals[g] += out.exposure[g];
            merit_totals[g] += merits[g];
        }
    }
    let pairs: Vec<PairReport> = pairs
        .into_iter()
        .zip(&disparity)
        .map(|(pair, &d)| PairReport { pair, disparity: d, disparity_sq: d * d })
        .collect();
    Ok(EvalReport {
        mode,
        query_count: queries.len(),
        avg_dcg,
        avg_rank: if ranked > 0 { rank_sum / ranked as f64 } else { 0.0 },
        disparity_sq: pairs.iter().map(|p| p.disparity_sq).sum(),
        pairs,
        exposure_totals,
        merit_totals,
    })
}

// ---------------------------------------------------------------------------
// Frontier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub lambda: f64,
    pub test_dcg: f64,
    pub test_disparity_sq: f64,
}

/// Test-set utility and disparity of every trained sweep point, ordered by
/// `lambda`. Points that failed to train are skipped.
pub fn frontier(
    sweep: &SweepResult,
    test: &[Query],
    group_count: usize,
    exam: &ExaminationModel,
    mode: EvalMode,
    seed: u64,
) -> Result<Vec<FrontierRow>> {
    let mut rows = Vec::with_capacity(sweep.points.len());
    for p in &sweep.points {
        let Some(params) = &p.params else {
            warn!("lambda {} has no trained policy; left out of the frontier", p.lambda);
            continue;
        };
        let report = evaluate(params, test, group_count, exam, mode, seed)?;
        rows.push(FrontierRow { lambda: p.lambda, test_dcg: report.avg_dcg, test_disparity_sq: report.disparity_sq });
    }
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(rows)
}

pub fn write_frontier_csv<W: Write>(mut w: W, rows: &[FrontierRow]) -> Result<()> {
    writeln!(w, "lambda,test_dcg,test_disparity_sq")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.lambda, r.test_dcg, r.test_disparity_sq)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Estimator audit

/// One line of an audit: a per-record value, or an aggregate when `qid` is
/// [`AUDIT_AGGREGATE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub qid: String,
    pub pair: (usize, usize),
    pub kind: EstimatorKind,
    pub value: f64,
}

pub const AUDIT_AGGREGATE: &str = "*";

/// Compares disparity estimators on click records against the true
/// disparity, with exposures from the policy's argmax rankings. Ratio
/// estimators are left out where undefined.
pub fn audit(
    params: &ScorerParams,
    queries: &[Query],
    records: &[ClickRecord],
    group_count: usize,
    exam: &ExaminationModel,
    eps_minus: Option<f64>,
) -> Result<Vec<AuditRow>> {
    let index: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let pairs = group_pairs(group_count);
    let mut rows = Vec::new();
    let mut per_kind: Vec<HashMap<EstimatorKind, Vec<DisparityEstimate>>> = vec![HashMap::new(); pairs.len()];
    let mut amortized: Vec<Vec<GroupTotals>> = vec![Vec::new(); pairs.len()];
    for rec in records {
        let q = index.get(rec.qid.as_str()).ok_or_else(|| Error::UnknownQuery(rec.qid.clone()))?;
        if rec.len() != q.len() {
            return Err(Error::DimensionMismatch { expected: q.len(), got: rec.len() });
        }
        let ranking = argmax_ranking(&params.scores(q)?);
        let groups = q.groups();
        let rel = q.relevances();
        let expo: Vec<f64> = (0..group_count).map(|g| estimators::group_exposure(&ranking, &groups, g, exam)).collect();
        for (p, &pair) in pairs.iter().enumerate() {
            let (ei, ej) = (expo[pair.0], expo[pair.1]);
            let mut found = vec![
                estimators::disparity_true(&rel, &groups, pair, ei, ej),
                estimators::disparity_ips(rec, &groups, pair, ei, ej)?,
            ];
            if let Some(eps) = eps_minus {
                found.push(estimators::disparity_noise_corrected(rec, &groups, pair, ei, ej, eps)?);
            }
            match estimators::disparity_naive_ratio(rec, &groups, pair, ei, ej) {
                Ok(e) => found.push(e),
                Err(Error::UndefinedEstimate(_)) => {}
                Err(e) => return Err(e),
            }
            amortized[p].push(GroupTotals {
                merit_i: estimators::merit_ips(rec, &groups, pair.0)?,
                merit_j: estimators::merit_ips(rec, &groups, pair.1)?,
                exposure_i: ei,
                exposure_j: ej,
            });
            for e in found {
                rows.push(AuditRow { qid: rec.qid.clone(), pair, kind: e.kind, value: e.value });
                per_kind[p].entry(e.kind).or_default().push(e);
            }
        }
    }
    for (p, &pair) in pairs.iter().enumerate() {
        for kind in [EstimatorKind::True, EstimatorKind::Ips, EstimatorKind::NoiseCorrected, EstimatorKind::NaiveRatio]
        {
            if let Some(list) = per_kind[p].get(&kind) {
                let agg = estimators::aggregate(list)?;
                rows.push(AuditRow { qid: AUDIT_AGGREGATE.into(), pair, kind, value: agg.value });
            }
        }
        if let Ok(e) = estimators::disparity_amortized(&amortized[p], pair) {
            rows.push(AuditRow { qid: AUDIT_AGGREGATE.into(), pair, kind: e.kind, value: e.value });
        }
    }
    Ok(rows)
}

pub fn write_audit_csv<W: Write>(mut w: W, rows: &[AuditRow]) -> Result<()> {
    writeln!(w, "qid,pair,kind,value")?;
    for r in rows {
        writeln!(w, "{},{}-{},{},{}", r.qid, r.pair.0, r.pair.1, r.kind.as_str(), r.value)?;
    }
    Ok(())
}
