//! Logging policy and position-based click simulation.
//!
//! Click logs are JSON lines, one impression per line:
//!
//! ```text
//! {"qid":"train-3","sigma":[2,1,3],"c":[1,0,0],"p":[0.5,1.0,0.3333333333333333]}
//! ```
//!
//! `sigma` holds the 1-based rank of every item, `c` the click bits and `p`
//! the examination propensity of every item under the logged ranking.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::policy::{argmax_ranking, ScorerParams};
use crate::{seed, Error, Ranking, Result};

/// Position-based examination with click noise.
///
/// An item at rank `k` is examined with probability `v_k = (1/k)^eta`. An
/// examined item is clicked with probability `eps_plus` if relevant and
/// `eps_minus` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExaminationModel {
    pub eta: f64,
    pub eps_plus: f64,
    pub eps_minus: f64,
}

impl Default for ExaminationModel {
    fn default() -> Self {
        Self { eta: 1.0, eps_plus: 1.0, eps_minus: 0.0 }
    }
}

impl ExaminationModel {
    pub fn new(eta: f64, eps_plus: f64, eps_minus: f64) -> Result<Self> {
        let m = Self { eta, eps_plus, eps_minus };
        m.validate()?;
        Ok(m)
    }

    /// Noise-free model with severity `eta`.
    pub fn position_bias(eta: f64) -> Self {
        Self { eta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Domain(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.eps_plus <= 1.0 && self.eps_plus > self.eps_minus && self.eps_minus >= 0.0) {
            return Err(Error::Domain(format!(
                "need 1 >= eps_plus > eps_minus >= 0, got eps_plus={} eps_minus={}",
                self.eps_plus, self.eps_minus
            )));
        }
        Ok(())
    }

    /// Examination probability at 1-based rank `k`.
    pub fn examination(&self, rank: usize) -> f64 {
        (1.0 / rank as f64).powf(self.eta)
    }

    /// `v_1, ..., v_n`.
    pub fn curve(&self, n: usize) -> Vec<f64> {
        (1..=n).map(|k| self.examination(k)).collect()
    }

    /// Click probability of an examined item.
    pub fn click_given_examined(&self, relevance: u8) -> f64 {
        if relevance == 1 {
            self.eps_plus
        } else {
            self.eps_minus
        }
    }
}

/// One logged impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub qid: String,
    #[serde(rename = "sigma")]
    pub logged_ranking: Ranking,
    #[serde(rename = "c")]
    pub clicks: Vec<u8>,
    #[serde(rename = "p")]
    pub propensities: Vec<f64>,
}

impl ClickRecord {
    /// A record revealing every relevance label: all items observed with
    /// propensity 1 and clicks equal to relevance.
    pub fn full_information(query: &Query) -> Self {
        Self {
            qid: query.id.clone(),
            logged_ranking: Ranking::identity(query.len()),
            clicks: query.relevances(),
            propensities: vec![1.0; query.len()],
        }
    }

    pub fn click_count(&self) -> usize {
        self.clicks.iter().filter(|&&c| c == 1).count()
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }
}

pub fn write_click_log<W: Write>(mut w: W, records: &[ClickRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_click_log<R: BufRead>(r: R) -> Result<Vec<ClickRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn total_clicks(records: &[ClickRecord]) -> usize {
    records.iter().map(ClickRecord::click_count).sum()
}

// ---------------------------------------------------------------------------
// Logging policy

/// Fits a weak linear logging policy on a random `fraction` of the training
/// queries by least-squares regression of relevance on features.
///
/// If the sample carries no label variation the fit is meaningless and the
/// zero scorer is returned instead.
pub fn train_logging_policy(train: &[Query], fraction: f64, seed: u64) -> Result<ScorerParams> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("log fraction must be in (0, 1], got {fraction}")));
    }
    let take = (train.len() as f64 * fraction).round() as usize;
    if take == 0 {
        return Err(Error::Domain(format!("fraction {fraction} of {} training queries selects no query", train.len())));
    }
    let mut rng = seed::rng(seed);
    let picked: Vec<&Query> = train.choose_multiple(&mut rng, take).collect();
    let f = picked[0].items.first().map_or(0, |it| it.features.len());

    let rows: Vec<(&[f64], f64)> =
        picked.iter().flat_map(|q| q.items.iter().map(|it| (it.features.as_slice(), it.relevance as f64))).collect();
    let first = rows[0].1;
    if rows.iter().all(|(_, y)| *y == first) {
        warn!("logging policy sample has identical labels; using zero weights");
        return Ok(ScorerParams::zeros(crate::policy::ScorerKind::Linear, f, 0));
    }
    for (x, _) in &rows {
        if x.len() != f {
            return Err(Error::DimensionMismatch { expected: f, got: x.len() });
        }
    }

    // Intercept column so the slope is not distorted by label imbalance;
    // the intercept itself does not affect rankings and is dropped.
    let n = rows.len();
    let x = DMatrix::from_fn(n, f + 1, |r, c| if c == f { 1.0 } else { rows[r].0[c] });
    let y = DVector::from_iterator(n, rows.iter().map(|(_, y)| *y));
    let mut gram = x.transpose() * &x;
    for i in 0..f {
        gram[(i, i)] += 1e-6 * n as f64;
    }
    let rhs = x.transpose() * y;
    let solution = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Domain("logging policy regression is singular".into()))?;
    Ok(ScorerParams::linear(solution.iter().take(f).copied().collect()))
}

// ---------------------------------------------------------------------------
// Simulation

fn logged_rankings(queries: &[Query], policy: &ScorerParams) -> Result<Vec<Ranking>> {
    queries.iter().map(|q| Ok(argmax_ranking(&policy.scores(q)?))).collect()
}

fn simulate_impression<R: Rng>(query: &Query, ranking: &Ranking, exam: &ExaminationModel, rng: &mut R) -> ClickRecord {
    let propensities: Vec<f64> = ranking.ranks().iter().map(|&k| exam.examination(k)).collect();
    let clicks = query
        .items
        .iter()
        .zip(&propensities)
        .map(|(it, &p)| {
            let examined = rng.random::<f64>() < p;
            let click = rng.random::<f64>() < exam.click_given_examined(it.relevance);
            u8::from(examined && click)
        })
        .collect();
    ClickRecord { qid: query.id.clone(), logged_ranking: ranking.clone(), clicks, propensities }
}

/// Simulates `impressions_per_query` impressions of every query under the
/// logging policy's deterministic ranking.
///
/// Impression `t` (query-major numbering) uses substream `t` of `seed`.
pub fn simulate_clicks(
    queries: &[Query],
    logging_policy: &ScorerParams,
    exam: &ExaminationModel,
    impressions_per_query: usize,
    seed: u64,
) -> Result<Vec<ClickRecord>> {
    exam.validate()?;
    if impressions_per_query == 0 {
        return Err(Error::Domain("impressions per query must be >= 1".into()));
    }
    let rankings = logged_rankings(queries, logging_policy)?;
    let mut out = Vec::with_capacity(queries.len() * impressions_per_query);
    for (qi, (q, r)) in queries.iter().zip(&rankings).enumerate() {
        for imp in 0..impressions_per_query {
            let stream = (qi * impressions_per_query + imp) as u64;
            out.push(simulate_impression(q, r, exam, &mut seed::substream(seed, stream)));
        }
    }
    Ok(out)
}

/// Simulates impressions round-robin over the queries until at least
/// `target_clicks` clicks have been logged.
pub fn simulate_click_budget(
    queries: &[Query],
    logging_policy: &ScorerParams,
    exam: &ExaminationModel,
    target_clicks: usize,
    seed: u64,
) -> Result<Vec<ClickRecord>> {
    exam.validate()?;
    if queries.is_empty() {
        return Err(Error::Domain("no queries to simulate".into()));
    }
    let rankings = logged_rankings(queries, logging_policy)?;
    let mut out = Vec::new();
    let mut clicks = 0usize;
    let mut stream = 0u64;
    let mut idle_rounds = 0usize;
    while clicks < target_clicks {
        let before = clicks;
        for (q, r) in queries.iter().zip(&rankings) {
            let rec = simulate_impression(q, r, exam, &mut seed::substream(seed, stream));
            stream += 1;
            clicks += rec.click_count();
            out.push(rec);
            if clicks >= target_clicks {
                break;
            }
        }
        idle_rounds = if clicks == before { idle_rounds + 1 } else { 0 };
        if idle_rounds >= 1000 {
            return Err(Error::Domain(format!(
                "no clicks after {idle_rounds} rounds; cannot reach {target_clicks} clicks"
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// False-positive noise intervention

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    /// 1-based position the known-irrelevant item is planted at.
    pub planted_position: usize,
    /// Fraction of impressions that receive the intervention.
    pub fraction: f64,
    /// Total impressions the fraction applies to.
    pub impressions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsMinusEstimate {
    pub eps_minus: f64,
    pub intervention_impressions: usize,
    pub planted_clicks: usize,
    pub examination_at_position: f64,
}

/// Estimates the false-positive click rate by planting a known-irrelevant
/// item at a fixed position: its click-through rate is `v_k * eps_minus`.
///
/// The planted item takes the place of whichever item the logging policy put
/// at that position (the two swap), so list length is preserved. Queries
/// without an irrelevant candidate or shorter than the position are skipped.
pub fn estimate_eps_minus(
    queries: &[Query],
    logging_policy: &ScorerParams,
    exam: &ExaminationModel,
    intervention: &Intervention,
    seed: u64,
) -> Result<EpsMinusEstimate> {
    exam.validate()?;
    let k = intervention.planted_position;
    if k == 0 {
        return Err(Error::Domain("planted position is 1-based".into()));
    }
    if !(intervention.fraction > 0.0 && intervention.fraction <= 1.0) {
        return Err(Error::Domain(format!("intervention fraction must be in (0, 1], got {}", intervention.fraction)));
    }
    let count = (intervention.impressions as f64 * intervention.fraction).round() as usize;
    let eligible: Vec<(&Query, Ranking, Vec<usize>)> = queries
        .iter()
        .filter(|q| q.len() >= k)
        .map(|q| {
            let irrelevant: Vec<usize> = (0..q.len()).filter(|&d| q.items[d].relevance == 0).collect();
            Ok((q, argmax_ranking(&logging_policy.scores(q)?), irrelevant))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, _, irr)| !irr.is_empty())
        .collect();
    if count == 0 || eligible.is_empty() {
        return Err(Error::Domain("zero intervention impressions".into()));
    }

    let v_k = exam.examination(k);
    let mut clicks = 0usize;
    for t in 0..count {
        let (q, logged, irrelevant) = &eligible[t % eligible.len()];
        let mut rng = seed::substream(seed, t as u64);
        let planted = *irrelevant.choose(&mut rng).expect("non-empty");
        let mut ranking = logged.clone();
        ranking.swap_positions(ranking.rank_of(planted) - 1, k - 1);
        debug_assert_eq!(ranking.rank_of(planted), k);
        let examined = rng.random::<f64>() < exam.examination(ranking.rank_of(planted));
        let click = rng.random::<f64>() < exam.click_given_examined(q.items[planted].relevance);
        if examined && click {
            clicks += 1;
        }
    }
    Ok(EpsMinusEstimate {
        eps_minus: clicks as f64 / count as f64 / v_k,
        intervention_impressions: count,
        planted_clicks: clicks,
        examination_at_position: v_k,
    })
}

/// Looks up query indices for click records by id.
pub fn index_by_qid(queries: &[Query]) -> HashMap<&str, usize> {
    queries.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect()
}

/// Shuffles impressions deterministically (used to subsample logs).
pub fn shuffled(records: &[ClickRecord], seed: u64) -> Vec<ClickRecord> {
    let mut out = records.to_vec();
    out.shuffle(&mut seed::rng(seed));
    out
}
