mod common;

use common::*;
use fairexpo::clicksim::{simulate_clicks, ClickRecord, ExaminationModel};
use fairexpo::dataset::{Item, Query};
use fairexpo::estimators::*;
use fairexpo::policy::ScorerParams;
use fairexpo::{seed, Error, Ranking};

#[test]
fn true_utility_matches_oracle() {
    let mut rng = seed::rng(1);
    for _ in 0..20 {
        let sigma = random_ranking(7, &mut rng);
        let rel = random_rel(7, &mut rng);
        assert!((delta_true(&sigma, &rel, MetricWeight::Dcg) - dcg(&sigma, &rel)).abs() < 1e-12);
        let avg_rank: f64 = rel.iter().enumerate().map(|(d, &r)| -(r as f64) * sigma.rank_of(d) as f64).sum();
        assert!((delta_true(&sigma, &rel, MetricWeight::AvgRank) - avg_rank).abs() < 1e-12);
    }
}

#[test]
fn ips_utility_is_unbiased_for_both_metrics() {
    let mut rng = seed::rng(2);
    for &eta in &[0.5, 1.0, 2.0] {
        for _ in 0..10 {
            let logged = random_ranking(6, &mut rng);
            let sigma = random_ranking(6, &mut rng);
            let rel = random_rel(6, &mut rng);
            for metric in [MetricWeight::Dcg, MetricWeight::AvgRank] {
                let e = expectation(&rel, &logged, eta, (1.0, 0.0), |r| delta_ips(&sigma, r, metric).unwrap());
                let truth = delta_true(&sigma, &rel, metric);
                assert!((e - truth).abs() < 1e-10, "eta {eta} {metric:?}: {e} vs {truth}");
            }
        }
    }
}

#[test]
fn ips_disparity_is_unbiased() {
    let mut rng = seed::rng(3);
    for _ in 0..20 {
        let logged = random_ranking(7, &mut rng);
        let sigma = random_ranking(7, &mut rng);
        let rel = random_rel(7, &mut rng);
        let groups = random_groups(7, &mut rng);
        let e = item_exposure(&sigma, 1.0);
        let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));
        let est =
            expectation(&rel, &logged, 1.0, (1.0, 0.0), |r| disparity_ips(r, &groups, (0, 1), e0, e1).unwrap().value);
        let truth = disparity(&sigma, &rel, &groups, 1.0);
        assert!((est - truth).abs() < 1e-10);
        let lib = disparity_true(&rel, &groups, (0, 1), e0, e1).value;
        assert!((lib - truth).abs() < 1e-12);
    }
}

#[test]
fn unweighted_merit_underestimates_lower_ranked_relevance() {
    // relevant items at ranks 1 and 4 of group 0
    let logged = Ranking::identity(4);
    let rel = [1, 0, 0, 1];
    let groups = [0, 1, 1, 0];
    let e = expectation(&rel, &logged, 1.0, (1.0, 0.0), |r| merit_unweighted(r, &groups, 0));
    assert!((e - 1.25).abs() < 1e-12);
    let ips = expectation(&rel, &logged, 1.0, (1.0, 0.0), |r| merit_ips(r, &groups, 0).unwrap());
    assert!((ips - 2.0).abs() < 1e-12);
}

/// Group 0 is one relevant item always shown first; group 1 has two relevant
/// items at ranks 3 and 4, so its IPS merit is 0, 3, 4 or 7.
fn ratio_instance() -> (Vec<u8>, Vec<usize>, Ranking) {
    (vec![1, 0, 1, 1], vec![0, 0, 1, 1], Ranking::identity(4))
}

#[test]
fn naive_ratio_is_biased_where_ips_is_exact() {
    let (rel, groups, logged) = ratio_instance();
    let sigma = Ranking::from_order(vec![2, 0, 3, 1]).unwrap();
    let e = item_exposure(&sigma, 1.0);
    let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));

    // the ratio is undefined when a group has no clicks: condition on both
    // merits being positive
    let mut mass = 0.0;
    let mut ratio = 0.0;
    for (clicks, prob) in click_outcomes(&rel, &logged, 1.0, 1.0, 0.0) {
        match disparity_naive_ratio(&record(&logged, clicks, 1.0), &groups, (0, 1), e0, e1) {
            Ok(d) => {
                mass += prob;
                ratio += prob * d.value;
            }
            Err(Error::UndefinedEstimate(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!((mass - 0.5).abs() < 1e-12);
    let conditional = ratio / mass;
    let truth = e0 / group_merit(&rel, &groups, 0) - e1 / group_merit(&rel, &groups, 1);
    // E[1 / M1 | M1 > 0] = (1/4 * 1/3 + 1/6 * 1/4 + 1/12 * 1/7) / (1/2)
    let inv = (1.0 / 12.0 + 1.0 / 24.0 + 1.0 / 84.0) / 0.5;
    assert!((conditional - (e0 - e1 * inv)).abs() < 1e-12);
    assert!((conditional - truth).abs() > 0.05);

    let ips = expectation(&rel, &logged, 1.0, (1.0, 0.0), |r| disparity_ips(r, &groups, (0, 1), e0, e1).unwrap().value);
    assert!((ips - disparity(&sigma, &rel, &groups, 1.0)).abs() < 1e-12);
}

#[test]
fn amortized_ratio_is_biased_for_few_queries() {
    let (rel, groups, logged) = ratio_instance();
    let sigma = Ranking::identity(4);
    let e = item_exposure(&sigma, 1.0);
    let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));
    // one query: the amortized ratio reduces to the per-query ratio
    let outcomes = click_outcomes(&rel, &logged, 1.0, 1.0, 0.0);
    let mut mass = 0.0;
    let mut value = 0.0;
    for (clicks, prob) in &outcomes {
        let rec = record(&logged, clicks.clone(), 1.0);
        if let Ok(d) = disparity_amortized_ips(&[(&rec, &groups, e0, e1)], (0, 1)) {
            mass += prob;
            value += prob * d.value;
        }
    }
    let truth = e0 / 1.0 - e1 / 2.0;
    assert!((value / mass - truth).abs() > 0.05);
}

#[test]
fn noise_corrected_expectation_scales_true_disparity() {
    let mut rng = seed::rng(4);
    for &(ep, em) in &[(1.0, 0.1), (0.9, 0.2), (0.7, 0.3)] {
        for _ in 0..10 {
            let logged = random_ranking(6, &mut rng);
            let sigma = random_ranking(6, &mut rng);
            let rel = random_rel(6, &mut rng);
            let groups = random_groups(6, &mut rng);
            let e = item_exposure(&sigma, 1.0);
            let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));
            let corrected = expectation(&rel, &logged, 1.0, (ep, em), |r| {
                disparity_noise_corrected(r, &groups, (0, 1), e0, e1, em).unwrap().value
            });
            let truth = disparity(&sigma, &rel, &groups, 1.0);
            assert!((corrected - (ep - em) * truth).abs() < 1e-10);

            // the uncorrected estimator carries the size-dependent offset
            let raw =
                expectation(&rel, &logged, 1.0, (ep, em), |r| disparity_ips(r, &groups, (0, 1), e0, e1).unwrap().value);
            let n0 = groups.iter().filter(|&&g| g == 0).count() as f64;
            let n1 = groups.len() as f64 - n0;
            assert!((raw - (ep - em) * truth - em * (n1 * e0 - n0 * e1)).abs() < 1e-10);
        }
    }
}

#[test]
fn uncorrected_estimator_can_flip_the_sign() {
    // one item in group 0 at the top, three in group 1 below it
    let rel = [1, 1, 0, 0];
    let groups = [0, 1, 1, 1];
    let sigma = Ranking::identity(4);
    let logged = Ranking::identity(4);
    let e = item_exposure(&sigma, 1.0);
    let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));
    let truth = disparity(&sigma, &rel, &groups, 1.0);
    let (ep, em) = (0.9, 0.2);
    let raw = expectation(&rel, &logged, 1.0, (ep, em), |r| disparity_ips(r, &groups, (0, 1), e0, e1).unwrap().value);
    let corrected = expectation(&rel, &logged, 1.0, (ep, em), |r| {
        disparity_noise_corrected(r, &groups, (0, 1), e0, e1, em).unwrap().value
    });
    assert!(truth < 0.0);
    assert!(raw > 0.0, "expected a sign flip, got {raw}");
    assert!(corrected < 0.0);
}

#[test]
fn noise_corrected_estimate_converges_under_simulation() {
    let items = [(1u8, 0usize), (0, 1), (1, 1), (0, 0), (1, 0), (0, 1)]
        .iter()
        .enumerate()
        .map(|(d, &(rel, group))| Item { features: vec![-(d as f64)], relevance: rel, group })
        .collect();
    let query = Query { id: "q".into(), items };
    let exam = ExaminationModel::new(1.0, 0.9, 0.15).unwrap();
    let logging = ScorerParams::linear(vec![1.0]);
    let records = simulate_clicks(std::slice::from_ref(&query), &logging, &exam, 100_000, 5).unwrap();

    let groups = query.groups();
    let sigma = Ranking::from_order(vec![5, 4, 3, 2, 1, 0]).unwrap();
    let e = item_exposure(&sigma, 1.0);
    let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));
    let values: Vec<f64> =
        records.iter().map(|r| disparity_noise_corrected(r, &groups, (0, 1), e0, e1, 0.15).unwrap().value).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let target = (0.9 - 0.15) * disparity(&sigma, &query.relevances(), &groups, 1.0);
    assert!((mean - target).abs() < 4.0 * sd / n.sqrt(), "{mean} vs {target} (se {})", sd / n.sqrt());
}

#[test]
fn amortized_and_bilinear_agree_under_constant_merits() {
    // every query has one relevant item per group; exposure totals are fixed
    // because the two groups cover the whole list
    let mut rng = seed::rng(6);
    let groups = [0, 0, 0, 1, 1, 1];
    let rel = [1, 0, 0, 1, 0, 0];
    let mut per_query = Vec::new();
    let mut bilinear = Vec::new();
    for _ in 0..40 {
        let sigma = random_ranking(6, &mut rng);
        let e = item_exposure(&sigma, 1.0);
        let (e0, e1) = (group_total(&e, &groups, 0), group_total(&e, &groups, 1));
        per_query.push(GroupTotals { merit_i: 1.0, merit_j: 1.0, exposure_i: e0, exposure_j: e1 });
        bilinear.push(disparity_true(&rel, &groups, (0, 1), e0, e1));
    }
    let d = aggregate(&bilinear).unwrap().value;
    let d_prime = disparity_amortized(&per_query, (0, 1)).unwrap().value;
    assert!((d - d_prime).abs() < 1e-12);
}

#[test]
fn estimators_reject_bad_records() {
    let groups = [0, 1];
    let rec = ClickRecord {
        qid: "q".into(),
        logged_ranking: Ranking::identity(2),
        clicks: vec![1, 0],
        propensities: vec![0.0, 1.0],
    };
    assert!(matches!(merit_ips(&rec, &groups, 0), Err(Error::NonPositivePropensity { .. })));
    assert!(disparity_noise_corrected(&rec, &groups, (0, 1), 1.0, 1.0, 1.0).is_err());
}
