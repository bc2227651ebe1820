//! Independent oracles shared by the integration tests. Nothing here calls
//! into the estimators it is used to check.
#![allow(dead_code)]

use fairexpo::clicksim::ClickRecord;
use fairexpo::Ranking;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn dcg_weight(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

pub fn examination(rank: usize, eta: f64) -> f64 {
    (1.0 / rank as f64).powf(eta)
}

/// Examination probability of every item under `ranking`.
pub fn item_exposure(ranking: &Ranking, eta: f64) -> Vec<f64> {
    ranking.ranks().iter().map(|&k| examination(k, eta)).collect()
}

pub fn group_total(values: &[f64], groups: &[usize], g: usize) -> f64 {
    values.iter().zip(groups).filter(|(_, &x)| x == g).map(|(v, _)| v).sum()
}

pub fn group_merit(rel: &[u8], groups: &[usize], g: usize) -> f64 {
    rel.iter().zip(groups).filter(|(_, &x)| x == g).map(|(&r, _)| r as f64).sum()
}

/// `sum_d rel_d / log2(1 + rank(d))`.
pub fn dcg(ranking: &Ranking, rel: &[u8]) -> f64 {
    rel.iter().enumerate().map(|(d, &r)| r as f64 * dcg_weight(ranking.rank_of(d))).sum()
}

/// True `M_j Expo_i - M_i Expo_j` of `ranking`.
pub fn disparity(ranking: &Ranking, rel: &[u8], groups: &[usize], eta: f64) -> f64 {
    let e = item_exposure(ranking, eta);
    group_merit(rel, groups, 1) * group_total(&e, groups, 0) - group_merit(rel, groups, 0) * group_total(&e, groups, 1)
}

/// Every click vector of one impression of `logged` with its probability.
///
/// Each item is in one of three states: not examined, examined and clicked,
/// examined and not clicked. An examined item is clicked with probability
/// `eps_plus` if relevant and `eps_minus` otherwise, so the noise-free case
/// is `eps_plus = 1, eps_minus = 0`. Zero-probability states are pruned.
pub fn click_outcomes(rel: &[u8], logged: &Ranking, eta: f64, eps_plus: f64, eps_minus: f64) -> Vec<(Vec<u8>, f64)> {
    let p = item_exposure(logged, eta);
    let mut out = vec![(Vec::with_capacity(rel.len()), 1.0)];
    for (d, &r) in rel.iter().enumerate() {
        let click = if r == 1 { eps_plus } else { eps_minus };
        let states = [(0u8, 1.0 - p[d]), (1, p[d] * click), (0, p[d] * (1.0 - click))];
        let mut next = Vec::with_capacity(out.len() * 3);
        for (clicks, prob) in &out {
            for &(c, q) in &states {
                if q > 0.0 {
                    let mut v: Vec<u8> = clicks.clone();
                    v.push(c);
                    next.push((v, prob * q));
                }
            }
        }
        out = next;
    }
    out
}

pub fn record(logged: &Ranking, clicks: Vec<u8>, eta: f64) -> ClickRecord {
    ClickRecord { qid: "q".into(), logged_ranking: logged.clone(), propensities: item_exposure(logged, eta), clicks }
}

/// `E[f(record)]` over all click outcomes of one impression.
pub fn expectation(
    rel: &[u8],
    logged: &Ranking,
    eta: f64,
    noise: (f64, f64),
    mut f: impl FnMut(&ClickRecord) -> f64,
) -> f64 {
    click_outcomes(rel, logged, eta, noise.0, noise.1)
        .into_iter()
        .map(|(clicks, prob)| prob * f(&record(logged, clicks, eta)))
        .sum()
}

pub fn random_ranking<R: Rng>(n: usize, rng: &mut R) -> Ranking {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ranking::from_order(order).unwrap()
}

pub fn random_rel<R: Rng>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect()
}

/// Two-group labels with both groups non-empty.
pub fn random_groups<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    loop {
        let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if g.contains(&0) && g.contains(&1) {
            return g;
        }
    }
}

/// Central finite difference of `f` along every coordinate of `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise relative error, with `floor` guarding exact zeros.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
