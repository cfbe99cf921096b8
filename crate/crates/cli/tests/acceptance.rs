//! Acceptance checks, one PASS/FAIL line per criterion.

use std::process::{Command, ExitCode};
use std::time::Instant;

use critscore::inference::{detect_critical_numeric, ScoreModel};
use critscore::models::expmix::{
    expmix_loglik, expmix_modified_info_with, expmix_modified_score, expmix_score, expmix_simulate, ExpMixModel,
};
use critscore::models::lmm::{
    build_sigma, lmm_loglik, lmm_modified_info, lmm_modified_info_group, lmm_score, lmm_simulate, lmm_xi, LmmData,
    LmmGroup, LmmModel,
};
use critscore::models::toy::{toy_simulate, toy_statistic_closed_form, ToyModel};
use critscore::rng::stream;
use critscore::sim::run_power;
use critscore::{chisq_cdf, chisq_quantile, critical_pattern, modified_statistic, run_coverage, ParameterPoint, SimConfig, StatKind};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ChiSquared as RefChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
    report: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            report: Vec::new(),
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Second derivative at 0 of a function even in its argument, from
/// `2(f(h) − f(0))/h²` extrapolated over `h` and `2h`.
fn even_second(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let f0 = f(0.0);
    let a = |t: f64| 2.0 * (f(t) - f0) / (t * t);
    (4.0 * a(h) - a(2.0 * h)) / 3.0
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
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

fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((n + m) as f64 / (n * m) as f64).sqrt()
}

fn random_lmm(seed: u64, sizes: &[usize], q: usize) -> LmmData {
    let mut rng = stream(seed, 0);
    let groups = sizes
        .iter()
        .map(|&m| {
            let mut x = DMatrix::zeros(m, 2);
            let mut z = DMatrix::zeros(m, q);
            for t in 0..m {
                let time = t as f64 + rng.random::<f64>();
                x[(t, 0)] = 1.0;
                x[(t, 1)] = time;
                z[(t, 0)] = 1.0;
                for c in 1..q {
                    z[(t, c)] = normal(&mut rng) + 0.3 * time;
                }
            }
            let y = DVector::from_fn(m, |_, _| 2.0 * normal(&mut rng));
            LmmGroup::new(y, x, z).unwrap()
        })
        .collect();
    LmmData::new(groups, (0..q).collect()).unwrap()
}

fn closed_form_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for rep in 0..50u64 {
        for r in [1, 3] {
            let data = toy_simulate(0.4, 100, r, 500 + rep).unwrap();
            for theta in [0.0, 1e-6, 0.1, 1.0] {
                let generic = modified_statistic(&ToyModel, &ToyModel::theta(theta).unwrap(), &data).unwrap().statistic;
                let closed = toy_statistic_closed_form(theta, &data).unwrap();
                worst = worst.max(rel_err(generic, closed));
            }
        }
    }
    Outcome::new(worst < 1e-8, format!("max relative difference {worst:.2e} (tol 1e-8)"))
}

fn pivotality() -> Outcome {
    let (reps, n) = (5000usize, 100usize);
    let crit = ks_critical(0.005, reps, reps);
    let mut pass = true;
    let mut parts = Vec::new();
    let mut report = Vec::new();
    for r in [1usize, 3] {
        let at = |theta: f64, seed: u64| -> Vec<f64> {
            (0..reps as u64)
                .map(|k| toy_statistic_closed_form(theta, &toy_simulate(theta, n, r, seed + k).unwrap()).unwrap())
                .collect()
        };
        let near = at(1e-6, 10_000 * r as u64);
        let far = at(0.5, 20_000 * r as u64);
        let d_pivot = ks_two_sample(&near, &far);
        let chi = ChiSquared::new(n as f64).unwrap();
        let mut rng = stream(77, r as u64);
        let draws: Vec<f64> = (0..reps).map(|_| chi.sample(&mut rng)).collect();
        let (rf, nf) = (r as f64, n as f64);
        // Σ(yᵢᵀ1)²/(1+rθ²) is r·χ²ₙ, so the statistic is (r·χ²ₙ − rn)²/(2r²n)
        let law: Vec<f64> = draws.iter().map(|c| (rf * c - rf * nf).powi(2) / (2.0 * rf * rf * nf)).collect();
        let d_law = ks_two_sample(&near, &law);
        pass &= d_pivot < crit && d_law < crit;
        parts.push(format!("r={r}: KS(1e-6 vs 0.5) {d_pivot:.4}, KS(vs law) {d_law:.4}"));
        if r > 1 {
            let literal: Vec<f64> = draws.iter().map(|c| (rf * c - rf * nf).powi(2) / (2.0 * rf * nf)).collect();
            report.push(format!(
                "r={r}: KS against (rχ²ₙ − rn)²/(2rn) without the extra 1/r is {:.4}",
                ks_two_sample(&near, &literal)
            ));
        }
    }
    let mut o = Outcome::new(pass, format!("{}; critical {crit:.4}", parts.join("; ")));
    o.report = report;
    o
}

fn derivatives() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..25u64 {
        let mut rng = stream(3000 + case, 7);
        let sizes: Vec<usize> = (0..4).map(|_| 2 + rng.random_range(0..4usize)).collect();
        let data = random_lmm(3000 + case, &sizes, 2);
        let lambda = [0.2 + rng.random::<f64>(), 0.1 + 0.5 * rng.random::<f64>()];
        let psi = [normal(&mut rng), 0.3 * normal(&mut rng)];
        let sigma = 0.5 + rng.random::<f64>();
        let s = lmm_score(&lambda, &psi, sigma, &data).unwrap();
        for j in 0..2 {
            let f = |t: f64| {
                let mut l = lambda;
                l[j] = t;
                lmm_loglik(&l, &psi, sigma, &data).unwrap()
            };
            worst = worst.max(rel_err(s.lambda[j], central(f, lambda[j], 1e-5)));
            let mut l0 = lambda;
            l0[j] = 0.0;
            let xi = lmm_xi(&l0, &psi, sigma, &data).unwrap()[j];
            let g = |t: f64| {
                let mut l = l0;
                l[j] = t;
                lmm_loglik(&l, &psi, sigma, &data).unwrap()
            };
            worst = worst.max(rel_err(xi, even_second(g, 1e-3)));
            let f = |t: f64| {
                let mut p = psi;
                p[j] = t;
                lmm_loglik(&lambda, &p, sigma, &data).unwrap()
            };
            worst = worst.max(rel_err(s.psi[j], central(f, psi[j], 1e-5)));
        }
        let f = |t: f64| lmm_loglik(&lambda, &psi, t, &data).unwrap();
        worst = worst.max(rel_err(s.sigma, central(f, sigma, 1e-5)));

        let psi_e = 0.5 + 2.0 * rng.random::<f64>();
        let lambda_e = 0.05 + 0.85 * psi_e / 3f64.sqrt() * rng.random::<f64>();
        let em = expmix_simulate(lambda_e, psi_e, 8, 4100 + case).unwrap();
        let se = expmix_score(lambda_e, psi_e, &em).unwrap();
        let h = 1e-6 * psi_e;
        worst = worst.max(rel_err(se[0], central(|t| expmix_loglik(t, psi_e, &em).unwrap(), lambda_e, h)));
        worst = worst.max(rel_err(se[1], central(|t| expmix_loglik(lambda_e, t, &em).unwrap(), psi_e, h)));
        let pattern = critical_pattern(&ExpMixModel::theta(0.0, psi_e).unwrap(), 0.0);
        let ms = expmix_modified_score(0.0, psi_e, &em, &pattern).unwrap();
        worst = worst.max(rel_err(ms[0], even_second(|t| expmix_loglik(t, psi_e, &em).unwrap(), 1e-3 * psi_e)));
        worst = worst.max(rel_err(ms[1], central(|t| expmix_loglik(0.0, t, &em).unwrap(), psi_e, h)));
    }
    Outcome::new(worst < 1e-5, format!("max relative difference {worst:.2e} over 25 instances per model (tol 1e-5)"))
}

/// Largest entrywise deviation, in MC standard errors, between an analytic
/// per-draw covariance and `draws` simulated score vectors.
fn mc_deviation(analytic: &DMatrix<f64>, chunks: u64, chunk_scores: impl Fn(u64) -> Vec<DVector<f64>>) -> f64 {
    let dim = analytic.nrows();
    let mut s1 = DMatrix::zeros(dim, dim);
    let mut s2 = DMatrix::zeros(dim, dim);
    let mut count = 0usize;
    for c in 0..chunks {
        for s in chunk_scores(c) {
            let p = &s * s.transpose();
            s2 += p.component_mul(&p);
            s1 += p;
            count += 1;
        }
    }
    let n = count as f64;
    let mean = s1 / n;
    let se = (s2 / n - mean.component_mul(&mean)).map(|v| (v.max(0.0) / n).sqrt());
    let mut worst = 0.0f64;
    for a in 0..dim {
        for b in 0..dim {
            let dev = (mean[(a, b)] - analytic[(a, b)]).abs();
            worst = worst.max(if se[(a, b)] > 0.0 { dev / se[(a, b)] } else if dev > 1e-12 { f64::INFINITY } else { 0.0 });
        }
    }
    worst
}

fn information_oracles() -> Outcome {
    const CHUNK: usize = 1000;
    const CHUNKS: u64 = 1000;
    let x = DMatrix::from_fn(6, 2, |t, c| if c == 0 { 1.0 } else { t as f64 * 0.7 });
    let g = LmmGroup::new(DVector::zeros(6), x.clone(), x).unwrap();
    let template = LmmData::new(vec![g; CHUNK], vec![0, 1]).unwrap();
    let model = LmmModel::unknown_sigma();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (label, lambda) in [("lmm (0, 0.3)", [0.0, 0.3]), ("lmm (0.4, 0.3)", [0.4, 0.3])] {
        let theta = model.theta(&lambda, &[1.0, -0.5], 0.8).unwrap();
        let pattern = critical_pattern(&theta, 0.0);
        let analytic = model.modified_info(&theta, &pattern, &template).unwrap() / CHUNK as f64;
        let dev = mc_deviation(&analytic, CHUNKS, |c| {
            let data = model.simulate(&theta, &template, 10_000 + c).unwrap();
            (0..CHUNK).map(|g| model.group_modified_score(&theta, &pattern, &data, g).unwrap()).collect()
        });
        worst = worst.max(dev);
        parts.push(format!("{label} {dev:.2}"));
    }
    for (label, l, p) in [("expmix (0, 1.5)", 0.0, 1.5), ("expmix (0.3, 1)", 0.3, 1.0)] {
        let theta = ExpMixModel::theta(l, p).unwrap();
        let pattern = critical_pattern(&theta, 0.0);
        let analytic = ExpMixModel
            .modified_info(&theta, &pattern, &expmix_simulate(l, p, 1, 0).unwrap())
            .unwrap();
        let dev = mc_deviation(&analytic, CHUNKS, |c| {
            let data = expmix_simulate(l, p, CHUNK, 20_000 + c).unwrap();
            (0..CHUNK).map(|g| ExpMixModel.group_modified_score(&theta, &pattern, &data, g).unwrap()).collect()
        });
        worst = worst.max(dev);
        parts.push(format!("{label} {dev:.2}"));
    }
    Outcome::new(
        worst <= 4.0,
        format!("max |MC − analytic| / MC s.e. over 10^6 draws: {} (tol 4)", parts.join(", ")),
    )
}

fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    (e.min(), e.max())
}

fn information_bounds() -> Outcome {
    let mut violations = 0;
    for case in 0..100u64 {
        let mut rng = stream(900 + case, 1);
        let q = 1 + (case as usize % 3);
        let m = q + rng.random_range(0..6usize);
        let data = random_lmm(900 + case, &[m], q);
        let lambda: Vec<f64> = (0..q)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { 2.0 * rng.random::<f64>() })
            .collect();
        let sigma = 0.2 + 2.0 * rng.random::<f64>();
        let mut v = DVector::from_fn(q, |_, _| normal(&mut rng));
        v /= v.norm();
        let blocks = lmm_modified_info_group(&lambda, sigma, &data, 0, false).unwrap();
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&lambda));
        let quad = (v.transpose() * (&d * blocks.lambda_block * &d) * &v)[(0, 0)];
        let z = data.groups()[0].z();
        let (sig, _) = build_sigma(&lambda, sigma, z, data.scale_map()).unwrap();
        let (sig_lo, sig_hi) = eig_range(&sig);
        let (ztz_lo, ztz_hi) = eig_range(&(z.transpose() * z));
        let peak = (0..q).map(|j| (lambda[j] * v[j]).powi(2)).fold(0.0, f64::max);
        let lower = 2.0 * sig_hi.powi(-2) * ztz_lo.max(0.0).powi(2) * peak;
        let upper = 2.0 * m as f64 * sig_lo.powi(-2) * ztz_hi.powi(2) * peak;
        let slack = 1e-10 * upper;
        if quad < lower - slack || quad > upper + slack {
            violations += 1;
        }
    }
    Outcome::new(violations == 0, format!("{violations} violations in 100 (instance, v) pairs"))
}

fn null_space() -> Outcome {
    let data = random_lmm(11, &[4, 6, 5, 7, 3, 6, 5, 8], 2);
    let mut ok = true;
    let mut parts = Vec::new();
    let critical = lmm_modified_info(&[0.0, 0.3], 1.0, &data, true).unwrap().assemble(&[0.0, 0.3]);
    let dirs = detect_critical_numeric(&critical, 1e-10);
    ok &= dirs.len() == 1 && dirs[0].vector[0].abs() > 1.0 - 1e-6;
    parts.push(format!(
        "lmm (0, 0.3): {} direction(s), |dot e_λ1| {:.9}",
        dirs.len(),
        dirs.first().map_or(0.0, |d| d.vector[0].abs())
    ));
    for psi in [0.5, 1.0, 2.0] {
        let info = expmix_modified_info_with(0.0, psi, false, 50).unwrap();
        let dirs = detect_critical_numeric(&info, 1e-10);
        ok &= dirs.len() == 1 && dirs[0].vector[0].abs() > 1.0 - 1e-6;
    }
    parts.push("expmix λ = 0, ψ ∈ {0.5, 1, 2}: e_λ".into());
    let mut spurious = 0;
    for l in [[0.2, 0.3], [1.0, 0.05]] {
        let info = lmm_modified_info(&l, 1.0, &data, true).unwrap().assemble(&l);
        spurious += detect_critical_numeric(&info, 1e-10).len();
    }
    for (l, p) in [(0.3, 1.0), (0.05, 2.0)] {
        spurious += detect_critical_numeric(&expmix_modified_info_with(l, p, false, 50).unwrap(), 1e-10).len();
    }
    ok &= spurious == 0;
    parts.push(format!("{spurious} spurious at regular points"));
    Outcome::new(ok, parts.join("; "))
}

fn gap<M: ScoreModel>(model: &M, at0: &ParameterPoint, at_eps: &ParameterPoint, data: &M::Data) -> f64 {
    let t0 = modified_statistic(model, at0, data).unwrap().statistic;
    let te = modified_statistic(model, at_eps, data).unwrap().statistic;
    (te - t0).abs() / t0.max(1.0)
}

fn continuity() -> Outcome {
    let toy = toy_simulate(0.2, 100, 3, 9).unwrap();
    let g_toy = gap(&ToyModel, &ToyModel::theta(0.0).unwrap(), &ToyModel::theta(1e-5).unwrap(), &toy);
    let em = expmix_simulate(0.1, 1.0, 200, 10).unwrap();
    let g_em = gap(&ExpMixModel, &ExpMixModel::theta(0.0, 1.0).unwrap(), &ExpMixModel::theta(1e-5, 1.0).unwrap(), &em);
    let template = random_lmm(55, &[3, 5, 4, 6, 7, 2, 5, 4, 6, 3, 5, 4, 6, 5, 4, 3, 6, 5, 4, 7], 2);
    let data = lmm_simulate(&[0.3, 0.2], &[1.0, 0.5], 1.0, &template, 56).unwrap();
    let model = LmmModel::known_sigma(1.0);
    let mut g_lmm = 0.0f64;
    for j in 0..2 {
        let mut l0 = [0.3, 0.2];
        l0[j] = 0.0;
        let mut le = l0;
        le[j] = 1e-5;
        g_lmm = g_lmm.max(gap(
            &model,
            &model.theta(&l0, &[1.0, 0.5], 1.0).unwrap(),
            &model.theta(&le, &[1.0, 0.5], 1.0).unwrap(),
            &data,
        ));
    }
    let worst = g_toy.max(g_em).max(g_lmm);
    Outcome::new(
        worst < 1e-4,
        format!("relative gaps toy {g_toy:.2e}, expmix {g_em:.2e}, lmm {g_lmm:.2e} (tol 1e-4)"),
    )
}

fn coverage() -> Outcome {
    let config = SimConfig::default();
    let result = run_coverage(&config).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut report = Vec::new();
    for row in &result.rows {
        let tag = format!("({}, {})", row.lambda[0], row.lambda[1]);
        match row.statistic {
            StatKind::Modified => {
                ok &= (row.rate - 0.95).abs() <= 0.02;
                parts.push(format!("{tag} {:.4}", row.rate));
            }
            other => report.push(format!(
                "{other} at {tag}: coverage {:.4} ± {:.4}, excluded {}{}",
                row.rate,
                row.mc_se,
                row.excluded,
                if row.off_nominal { "  [off nominal]" } else { "" }
            )),
        }
    }
    let mut o = Outcome::new(ok, format!("modified coverage {} (band 0.95 ± 0.02)", parts.join(", ")));
    o.report = report;
    o
}

fn size() -> Outcome {
    let null = [1e-6, 1e-6];
    let config = SimConfig {
        lambdas: vec![null],
        statistics: vec![StatKind::Modified],
        ..SimConfig::default()
    };
    let result = run_power(&config, null).unwrap();
    let rate = result.rows[0].rate;
    Outcome::new(
        (rate - 0.05).abs() <= 0.02,
        format!("rejection rate {rate:.4} ± {:.4} over {} reps (band 0.05 ± 0.02)", result.rows[0].mc_se, result.rows[0].reps),
    )
}

fn reference_distribution() -> Outcome {
    let q = chisq_quantile(1, 0.95).unwrap();
    let mut worst = 0.0f64;
    let mut worst_ref = 0.0f64;
    for df in 1..=10usize {
        let reference = RefChiSquared::new(df as f64).unwrap();
        for k in 1..200 {
            let p = k as f64 / 200.0;
            let x = chisq_quantile(df, p).unwrap();
            worst = worst.max((chisq_cdf(df, x).unwrap() - p).abs());
            worst_ref = worst_ref.max((reference.cdf(x) - p).abs());
        }
    }
    Outcome::new(
        (3.8405..=3.8420).contains(&q) && worst < 1e-9 && worst_ref < 1e-9,
        format!("chi2_1 0.95 quantile {q:.6}; duality error {worst:.1e}, against reference cdf {worst_ref:.1e}"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"reps": 40, "lambdas": [[0.000001, 0.000001], [0.2, 0.2]], "seed": 17}"#,
    )
    .unwrap();
    let run = |threads: &str, tag: &str| -> (Vec<u8>, Vec<u8>) {
        let raw = dir.path().join(format!("raw_{tag}.csv"));
        let out = dir.path().join(format!("summary_{tag}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_critscore"))
            .env("CRITSCORE_THREADS", threads)
            .args(["simulate", "--config", config.to_str().unwrap(), "--raw", raw.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        (std::fs::read(raw).unwrap(), std::fs::read(out).unwrap())
    };
    let a = run("1", "a");
    let b = run("4", "b");
    let c = run("2", "c");
    let same = a == b && b == c;
    Outcome::new(
        same && !a.0.is_empty(),
        format!("raw CSV {} bytes, identical across 1, 4 and 2 threads: {same}", a.0.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("closed-form equivalence", closed_form_equivalence),
        ("pivotality", pivotality),
        ("derivative correctness", derivatives),
        ("information oracles", information_oracles),
        ("information eigenvalue bounds", information_bounds),
        ("null-space detection", null_space),
        ("continuity", continuity),
        ("coverage at desk scale", coverage),
        ("size at desk scale", size),
        ("reference distribution", reference_distribution),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {name}: {} [{:.1} s]", i + 1, o.detail, start.elapsed().as_secs_f64());
        for line in &o.report {
            println!("        {line}");
        }
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
