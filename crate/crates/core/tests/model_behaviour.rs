use critscore::models::expmix::{
    expmix_loglik, expmix_modified_score, expmix_score, expmix_simulate, ExpMixData, ExpMixModel,
};
use critscore::models::lmm::{lmm_simulate, LmmData, LmmGroup, LmmModel};
use critscore::models::toy::{toy_simulate, toy_statistic_closed_form, ToyModel};
use critscore::rng::stream;
use critscore::{chisq_quantile, critical_pattern, modified_statistic, ParameterPoint};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use statrs::distribution::{ChiSquared as ChiSq, ContinuousCDF};

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn even_second(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let f0 = f(0.0);
    let a = |t: f64| 2.0 * (f(t) - f0) / (t * t);
    (4.0 * a(h) - a(2.0 * h)) / 3.0
}

/// Two-sample Kolmogorov-Smirnov distance.
fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at level `alpha`.
fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((n + m) as f64 / (n * m) as f64).sqrt()
}

#[test]
fn toy_generic_statistic_equals_closed_form() {
    for rep in 0..50u64 {
        for r in [1, 3] {
            let data = toy_simulate(0.4, 100, r, 500 + rep).unwrap();
            for theta in [0.0, 1e-6, 0.1, 1.0] {
                let generic = modified_statistic(&ToyModel, &ToyModel::theta(theta).unwrap(), &data)
                    .unwrap()
                    .statistic;
                let closed = toy_statistic_closed_form(theta, &data).unwrap();
                assert!(rel_close(generic, closed, 1e-8), "{theta} {r}: {generic} vs {closed}");
            }
        }
    }
}

#[test]
fn toy_statistic_is_pivotal_with_the_stated_law() {
    let (reps, n, r) = (2000, 100, 3);
    let at = |theta: f64, seed: u64| -> Vec<f64> {
        (0..reps)
            .map(|k| {
                let d = toy_simulate(theta, n, r, seed + k).unwrap();
                toy_statistic_closed_form(theta, &d).unwrap()
            })
            .collect()
    };
    let near = at(1e-6, 10_000);
    let far = at(0.5, 20_000);
    assert!(ks_distance(&near, &far) < ks_critical(0.005, reps as usize, reps as usize));

    // Σ(yᵢᵀ1)²/(1+rθ²) is r·χ²ₙ
    let chi = ChiSquared::new(n as f64).unwrap();
    let mut rng = stream(77, 0);
    let law: Vec<f64> = (0..reps)
        .map(|_| {
            let c = r as f64 * chi.sample(&mut rng) - (r * n) as f64;
            c * c / (2.0 * (r * r * n) as f64)
        })
        .collect();
    assert!(ks_distance(&near, &law) < ks_critical(0.005, reps as usize, reps as usize));
}

#[test]
fn expmix_derivatives_match_finite_differences() {
    for case in 0..25u64 {
        let mut rng = stream(4000 + case, 0);
        let psi = 0.5 + 2.0 * rng.random::<f64>();
        let lambda = 0.9 * psi / 3f64.sqrt() * rng.random::<f64>();
        let data = expmix_simulate(lambda, psi, 8, 4100 + case).unwrap();
        let s = expmix_score(lambda, psi, &data).unwrap();
        let h = 1e-6 * psi;
        let dl = (expmix_loglik(lambda + h, psi, &data).unwrap() - expmix_loglik((lambda - h).max(0.0), psi, &data).unwrap())
            / (lambda + h - (lambda - h).max(0.0));
        let dp = (expmix_loglik(lambda, psi + h, &data).unwrap() - expmix_loglik(lambda, psi - h, &data).unwrap()) / (2.0 * h);
        if lambda > 1e-4 {
            assert!(rel_close(s[0], dl, 1e-5), "case {case}: {} vs {dl}", s[0]);
        }
        assert!(rel_close(s[1], dp, 1e-5), "case {case}: {} vs {dp}", s[1]);

        let theta = ExpMixModel::theta(0.0, psi).unwrap();
        let pattern = critical_pattern(&theta, 0.0);
        let ms = expmix_modified_score(0.0, psi, &data, &pattern).unwrap();
        let fd = even_second(|t| expmix_loglik(t, psi, &data).unwrap(), 1e-3 * psi);
        assert!(rel_close(ms[0], fd, 1e-5), "case {case}: {} vs {fd}", ms[0]);
        assert!(rel_close(ms[1], expmix_score(0.0, psi, &data).unwrap()[1], 1e-12));
    }
}

fn lmm_fixture() -> (LmmModel, LmmData) {
    let mut rng = stream(55, 0);
    let groups = (0..30)
        .map(|_| {
            let m = 2 + rng.random_range(0..6usize);
            let x = DMatrix::from_fn(m, 2, |t, c| if c == 0 { 1.0 } else { t as f64 });
            LmmGroup::new(DVector::zeros(m), x.clone(), x).unwrap()
        })
        .collect();
    let template = LmmData::new(groups, vec![0, 1]).unwrap();
    let data = lmm_simulate(&[0.3, 0.2], &[1.0, 0.5], 1.0, &template, 56).unwrap();
    (LmmModel::known_sigma(1.0), data)
}

fn continuity_gap<M: critscore::inference::ScoreModel>(model: &M, at0: &ParameterPoint, at_eps: &ParameterPoint, data: &M::Data) -> f64 {
    let t0 = modified_statistic(model, at0, data).unwrap().statistic;
    let te = modified_statistic(model, at_eps, data).unwrap().statistic;
    (te - t0).abs() / t0.max(1.0)
}

#[test]
fn statistic_is_continuous_across_the_boundary() {
    let toy = toy_simulate(0.2, 100, 3, 9).unwrap();
    let gap = continuity_gap(&ToyModel, &ToyModel::theta(0.0).unwrap(), &ToyModel::theta(1e-5).unwrap(), &toy);
    assert!(gap < 1e-4, "toy {gap}");

    let em: ExpMixData = expmix_simulate(0.1, 1.0, 200, 10).unwrap();
    let gap = continuity_gap(
        &ExpMixModel,
        &ExpMixModel::theta(0.0, 1.0).unwrap(),
        &ExpMixModel::theta(1e-5, 1.0).unwrap(),
        &em,
    );
    assert!(gap < 1e-4, "expmix {gap}");

    let (model, data) = lmm_fixture();
    for j in 0..2 {
        let mut l0 = [0.3, 0.2];
        l0[j] = 0.0;
        let mut le = l0;
        le[j] = 1e-5;
        let gap = continuity_gap(
            &model,
            &model.theta(&l0, &[1.0, 0.5], 1.0).unwrap(),
            &model.theta(&le, &[1.0, 0.5], 1.0).unwrap(),
            &data,
        );
        assert!(gap < 1e-4, "lmm coordinate {j}: {gap}");
    }
}

#[test]
fn expmix_statistic_quantile_is_near_chi_square() {
    let q95 = chisq_quantile(2, 0.95).unwrap();
    for (lambda, psi) in [(0.0, 1.0), (0.05, 1.0), (0.3, 1.0)] {
        let theta = ExpMixModel::theta(lambda, psi).unwrap();
        let mut stats: Vec<f64> = (0..5000u64)
            .map(|k| {
                let d = expmix_simulate(lambda, psi, 200, 6000 + k).unwrap();
                modified_statistic(&ExpMixModel, &theta, &d).unwrap().statistic
            })
            .collect();
        stats.sort_by(f64::total_cmp);
        let emp = stats[(0.95 * stats.len() as f64) as usize];
        assert!((emp - q95).abs() < 0.25, "({lambda}, {psi}): {emp}");
    }
}

#[test]
fn toy_statistic_tail_matches_chi_square_one() {
    let dist = ChiSq::new(1.0).unwrap();
    let stats: Vec<f64> = (0..2000u64)
        .map(|k| toy_statistic_closed_form(0.3, &toy_simulate(0.3, 400, 2, 8000 + k).unwrap()).unwrap())
        .collect();
    let rate = stats.iter().filter(|&&s| s > dist.inverse_cdf(0.95)).count() as f64 / stats.len() as f64;
    assert!((rate - 0.05).abs() < 4.0 * (0.05f64 * 0.95 / 2000.0).sqrt(), "{rate}");
}
