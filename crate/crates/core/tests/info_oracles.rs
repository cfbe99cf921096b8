use critscore::inference::ScoreModel;
use critscore::models::expmix::{expmix_simulate, ExpMixModel};
use critscore::models::lmm::{LmmData, LmmGroup, LmmModel};
use critscore::{critical_pattern, ParameterPoint};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const DRAWS: usize = 200_000;
const CHUNK: usize = 1000;

/// Raw second moments of per-draw score vectors and their MC standard errors.
struct Moments {
    mean: DMatrix<f64>,
    se: DMatrix<f64>,
}

fn moments(dim: usize, chunks: usize, chunk_scores: impl Fn(u64) -> Vec<DVector<f64>> + Sync) -> Moments {
    let (s1, s2, count) = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let mut s1 = DMatrix::zeros(dim, dim);
            let mut s2 = DMatrix::zeros(dim, dim);
            let scores = chunk_scores(c);
            for s in &scores {
                let p = s * s.transpose();
                s2 += p.component_mul(&p);
                s1 += p;
            }
            (s1, s2, scores.len())
        })
        .reduce(
            || (DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim), 0),
            |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
        );
    let n = count as f64;
    let mean = s1 / n;
    let se = (s2 / n - mean.component_mul(&mean)).map(|v| (v.max(0.0) / n).sqrt());
    Moments { mean, se }
}

fn assert_within(analytic: &DMatrix<f64>, m: &Moments, label: &str) {
    for a in 0..analytic.nrows() {
        for b in 0..analytic.ncols() {
            let dev = (m.mean[(a, b)] - analytic[(a, b)]).abs();
            let tol = 4.0 * m.se[(a, b)] + 1e-12 * analytic[(a, b)].abs();
            assert!(dev <= tol, "{label} ({a},{b}): mc {} analytic {} se {}", m.mean[(a, b)], analytic[(a, b)], m.se[(a, b)]);
        }
    }
}

fn lmm_template(groups: usize) -> LmmData {
    let x = DMatrix::from_fn(6, 2, |t, c| if c == 0 { 1.0 } else { t as f64 * 0.7 });
    let g = LmmGroup::new(DVector::zeros(6), x.clone(), x).unwrap();
    LmmData::new(vec![g; groups], vec![0, 1]).unwrap()
}

fn check_lmm(lambda: [f64; 2], label: &str) {
    let model = LmmModel::unknown_sigma();
    let theta = model.theta(&lambda, &[1.0, -0.5], 0.8).unwrap();
    let pattern = critical_pattern(&theta, 0.0);
    let template = lmm_template(CHUNK);
    let analytic = model.modified_info(&theta, &pattern, &template).unwrap() / CHUNK as f64;
    let m = moments(theta.dim(), DRAWS / CHUNK, |c| {
        let data = model.simulate(&theta, &template, 1_000 + c).unwrap();
        (0..CHUNK)
            .map(|g| model.group_modified_score(&theta, &pattern, &data, g).unwrap())
            .collect()
    });
    assert_within(&analytic, &m, label);
}

fn check_expmix(theta: ParameterPoint, label: &str) {
    let pattern = critical_pattern(&theta, 0.0);
    let (l, p) = (theta.lambda()[0], theta.psi()[0]);
    let analytic = ExpMixModel.modified_info(&theta, &pattern, &expmix_simulate(l, p, 1, 0).unwrap()).unwrap();
    let m = moments(2, DRAWS / CHUNK, |c| {
        let data = expmix_simulate(l, p, CHUNK, 2_000 + c).unwrap();
        (0..CHUNK)
            .map(|g| ExpMixModel.group_modified_score(&theta, &pattern, &data, g).unwrap())
            .collect()
    });
    assert_within(&analytic, &m, label);
}

#[test]
fn lmm_information_matches_monte_carlo_at_a_critical_point() {
    check_lmm([0.0, 0.3], "lmm critical");
}

#[test]
fn lmm_information_matches_monte_carlo_at_a_regular_point() {
    check_lmm([0.4, 0.3], "lmm regular");
}

#[test]
fn expmix_information_matches_monte_carlo_at_a_critical_point() {
    check_expmix(ExpMixModel::theta(0.0, 1.5).unwrap(), "expmix critical");
}

#[test]
fn expmix_information_matches_monte_carlo_at_a_regular_point() {
    check_expmix(ExpMixModel::theta(0.3, 1.0).unwrap(), "expmix regular");
}
