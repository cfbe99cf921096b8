//! Least squares, profiled maximum likelihood and the Wald and likelihood
//! ratio competitors.

use nalgebra::{DMatrix, DVector};

use super::{check_sigma, col, lmm_modified_info, lmm_score, GroupCov, LmmData, LmmGroup, SigmaMode, LN_2PI};
use crate::error::{Error, Result};
use crate::inference::schur_complement;
use crate::linalg::PdFactor;
use crate::optim::{golden_section, nelder_mead, NelderMeadConfig};

const DESIGN_REL_TOL: f64 = 1e-12;

fn solve_design(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if m.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let f = PdFactor::new(m, DESIGN_REL_TOL).map_err(|e| match e {
        Error::SingularInformation { index, .. } => {
            Error::RankDeficientDesign(format!("{what} is singular at column {index}"))
        }
        other => other,
    })?;
    Ok(f.solve(rhs))
}

/// `(ΣXᵢᵀXᵢ)⁻¹ ΣXᵢᵀyᵢ`
pub fn lmm_ols(data: &LmmData) -> Result<DVector<f64>> {
    let p = data.n_fixed();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for g in data.groups() {
        xtx += &g.summary.xtx;
        xty += &g.summary.xty;
    }
    solve_design(&xtx, &xty, "X'X")
}

struct Profile {
    loglik: f64,
    psi: DVector<f64>,
}

fn profile(lambda: &[f64], sigma: f64, data: &LmmData) -> Result<Profile> {
    data.check_lambda(lambda)?;
    check_sigma(sigma)?;
    let lam = data.column_scales(lambda);
    let p = data.n_fixed();
    let mut xsx = DMatrix::zeros(p, p);
    let mut xsy = DVector::zeros(p);
    let mut ysy = 0.0;
    let mut base = 0.0;
    for g in data.groups() {
        let s = &g.summary;
        let cov = GroupCov::new(s, g.len(), &lam, sigma)?;
        let zy = col(&s.zty);
        xsx += cov.inv_form(&s.xtx, &s.ztx, &s.ztx);
        xsy += cov.inv_form(&col(&s.xty), &s.ztx, &zy).column(0);
        ysy += cov.inv_form(&DMatrix::from_element(1, 1, s.yty), &zy, &zy)[(0, 0)];
        base += g.len() as f64 * LN_2PI + cov.logdet;
    }
    let xsx = crate::linalg::symmetrize(&xsx);
    let psi = solve_design(&xsx, &xsy, "X'Σ⁻¹X")?;
    Ok(Profile {
        loglik: -0.5 * (base + ysy - xsy.dot(&psi)),
        psi,
    })
}

/// `ψ̃ = (ΣXᵢᵀΣᵢ⁻¹Xᵢ)⁻¹ ΣXᵢᵀΣᵢ⁻¹yᵢ`
pub fn lmm_gls(lambda: &[f64], sigma: f64, data: &LmmData) -> Result<DVector<f64>> {
    Ok(profile(lambda, sigma, data)?.psi)
}

/// `max_ψ ℓ(λ, ψ, σ)` and the maximizing `ψ̃(λ, σ)`.
pub fn lmm_profile_loglik(lambda: &[f64], sigma: f64, data: &LmmData) -> Result<(f64, DVector<f64>)> {
    let p = profile(lambda, sigma, data)?;
    Ok((p.loglik, p.psi))
}

#[derive(Debug, Clone, Copy)]
pub struct MleConfig {
    pub sigma: SigmaMode,
    pub nelder_mead: NelderMeadConfig,
    /// Relative tolerance on the projected gradient.
    pub grad_tol: f64,
    pub newton_steps: usize,
}

impl MleConfig {
    pub fn new(sigma: SigmaMode) -> Self {
        Self {
            sigma,
            nelder_mead: NelderMeadConfig {
                max_evals: 4000,
                f_tol: 1e-13,
                x_tol: 1e-8,
                initial_step: 0.2,
            },
            grad_tol: 1e-6,
            newton_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub lambda: Vec<f64>,
    pub psi: Vec<f64>,
    pub sigma: f64,
    pub loglik: f64,
    /// Norm of the projected gradient in `(λ, log σ)`.
    pub grad_norm: f64,
    pub converged: bool,
    pub evals: usize,
}

struct Objective<'a> {
    data: &'a LmmData,
    mode: SigmaMode,
    d1: usize,
}

impl Objective<'_> {
    fn unpack(&self, u: &[f64]) -> (Vec<f64>, f64) {
        // |u| reflects rather than clamps; ℓ is even in each λⱼ
        let lambda = u[..self.d1].iter().map(|v| v.abs()).collect();
        let sigma = match self.mode {
            SigmaMode::Known(s) => s,
            SigmaMode::Unknown => u[self.d1].exp(),
        };
        (lambda, sigma)
    }

    fn value(&self, u: &[f64]) -> f64 {
        let (lambda, sigma) = self.unpack(u);
        match profile(&lambda, sigma, self.data) {
            Ok(p) if p.loglik.is_finite() => p.loglik,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Gradient of the profile log-likelihood in `(λ, log σ)`.
    fn gradient(&self, lambda: &[f64], sigma: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let psi = profile(lambda, sigma, self.data)?.psi;
        let s = lmm_score(lambda, psi.as_slice(), sigma, self.data)?;
        let mut g = s.lambda.clone();
        if self.mode == SigmaMode::Unknown {
            g = g.push(sigma * s.sigma);
        }
        Ok((g, s.xi))
    }
}

fn projected_norm(g: &DVector<f64>, xi: &DVector<f64>, lambda: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (j, gj) in g.iter().enumerate() {
        let v = if j < lambda.len() && lambda[j] == 0.0 {
            // ℓ grows as ½ξⱼt² off the boundary when ξⱼ > 0
            xi[j].max(0.0)
        } else {
            *gj
        };
        sq += v * v;
    }
    sq.sqrt()
}

fn moment_start(data: &LmmData, mode: SigmaMode) -> Result<(Vec<f64>, f64)> {
    let psi = lmm_ols(data)?;
    let q = data.n_random();
    let mut rss = 0.0;
    let mut dof = 0usize;
    let mut all = Vec::new();
    let mut coefs: Vec<DVector<f64>> = Vec::new();
    let mut inv_diag = DVector::zeros(q);
    for g in data.groups() {
        let e = g.y() - g.x() * &psi;
        all.extend(e.iter().copied());
        if g.len() <= q {
            continue;
        }
        let ztz = &g.summary.ztz;
        if let Ok(f) = PdFactor::new(ztz, 1e-10) {
            let b = f.solve(&g.z().tr_mul(&e));
            rss += (&e - g.z() * &b).norm_squared();
            dof += g.len() - q;
            inv_diag += f.inverse().diagonal();
            coefs.push(b);
        }
    }
    let n_all = all.len() as f64;
    let sd = (all.iter().map(|v| v * v).sum::<f64>() / n_all.max(1.0)).sqrt().max(1e-8);
    let sigma = match mode {
        SigmaMode::Known(s) => s,
        SigmaMode::Unknown if dof > 0 && rss > 0.0 => (rss / dof as f64).sqrt(),
        SigmaMode::Unknown => sd,
    };
    let d1 = data.n_scales();
    let mut lam2 = vec![0.0; d1];
    let mut counts = vec![0usize; d1];
    if coefs.len() >= 2 {
        let m = coefs.len() as f64;
        for (k, &j) in data.scale_map().iter().enumerate() {
            let mean = coefs.iter().map(|b| b[k]).sum::<f64>() / m;
            let var = coefs.iter().map(|b| (b[k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            lam2[j] += (var - sigma * sigma * inv_diag[k] / m).max(0.0);
            counts[j] += 1;
        }
    }
    let floor = 0.05 * sd;
    let lambda = lam2
        .iter()
        .zip(&counts)
        .map(|(l, &c)| if c > 0 { (l / c as f64).sqrt().max(floor) } else { 0.5 * sd })
        .collect();
    Ok((lambda, sigma))
}

/// Maximum likelihood over `(λ[, σ])` with `ψ` profiled by GLS.
///
/// Nelder–Mead runs from the moment estimate, half of it and the boundary
/// point `λ = 0`; the best optimum is polished with projected Newton steps.
/// A fit whose projected gradient exceeds `grad_tol (1 + |ℓ|)` is returned
/// with `converged = false`.
pub fn lmm_mle(data: &LmmData, config: &MleConfig) -> Result<MleFit> {
    if let SigmaMode::Known(s) = config.sigma {
        check_sigma(s)?;
    }
    let d1 = data.n_scales();
    let obj = Objective {
        data,
        mode: config.sigma,
        d1,
    };
    let (lam0, sigma0) = moment_start(data, config.sigma)?;
    let to_u = |lambda: &[f64]| -> Vec<f64> {
        let mut u = lambda.to_vec();
        if config.sigma == SigmaMode::Unknown {
            u.push(sigma0.ln());
        }
        u
    };
    let starts = [
        to_u(&lam0),
        to_u(&lam0.iter().map(|l| 0.5 * l).collect::<Vec<_>>()),
        to_u(&vec![0.0; d1]),
    ];
    let mut evals = 0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let m = nelder_mead(|u| -obj.value(u), s, &config.nelder_mead);
        evals += m.evals;
        if best.as_ref().is_none_or(|(_, v)| -m.value > *v) {
            best = Some((m.x, -m.value));
        }
    }
    let (u, mut ll) = best.expect("at least one start");
    let (mut lambda, mut sigma) = obj.unpack(&u);
    if !ll.is_finite() {
        return Err(Error::Domain("log-likelihood is not finite at any start".into()));
    }

    // snap a scale onto the boundary when ℓ is no lower there (up to rounding)
    // and curves downward off it (ξⱼ ≤ 0), i.e. the boundary is a local maximum
    for j in 0..d1 {
        if lambda[j] > 0.0 {
            let mut trial = lambda.clone();
            trial[j] = 0.0;
            let v = profile(&trial, sigma, data)?.loglik;
            if v >= ll - 1e-10 * (1.0 + ll.abs()) && obj.gradient(&trial, sigma)?.1[j] <= 0.0 {
                lambda = trial;
                ll = ll.max(v);
            }
        }
    }

    // projected Newton polish on the free coordinates
    let (mut g, mut xi) = obj.gradient(&lambda, sigma)?;
    for _ in 0..config.newton_steps {
        if projected_norm(&g, &xi, &lambda) <= 0.01 * config.grad_tol * (1.0 + ll.abs()) {
            break;
        }
        let free: Vec<usize> = (0..g.len()).filter(|&j| j >= d1 || lambda[j] > 0.0).collect();
        if free.is_empty() {
            break;
        }
        let point = |lambda: &[f64], sigma: f64| -> Vec<f64> {
            let mut v = lambda.to_vec();
            if config.sigma == SigmaMode::Unknown {
                v.push(sigma.ln());
            }
            v
        };
        let x0 = point(&lambda, sigma);
        let nf = free.len();
        let mut h = DMatrix::zeros(nf, nf);
        for (a, &ja) in free.iter().enumerate() {
            let step = 1e-5 * x0[ja].abs().max(1e-2);
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[ja] += step;
            xm[ja] -= step;
            let (lp, sp) = obj.unpack(&xp);
            let (lm, sm) = obj.unpack(&xm);
            let gp = obj.gradient(&lp, sp)?.0;
            let gm = obj.gradient(&lm, sm)?.0;
            for (b, &jb) in free.iter().enumerate() {
                // central difference; undo the |·| reflection for a crossing
                h[(b, a)] = (gp[jb] - gm[jb]) / (2.0 * step);
            }
        }
        let h = crate::linalg::symmetrize(&h);
        let gf = DVector::from_iterator(nf, free.iter().map(|&j| g[j]));
        let neg = -&h;
        let dir = match PdFactor::new(&neg, 1e-12) {
            Ok(f) => f.solve(&gf),
            Err(_) => gf.clone() / (1.0 + gf.amax()),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut x1 = x0.clone();
            for (a, &j) in free.iter().enumerate() {
                x1[j] += t * dir[a];
            }
            let v = obj.value(&x1);
            let (l1, s1) = obj.unpack(&x1);
            // near the optimum the gain can be below the rounding noise of ℓ;
            // then a step that keeps ℓ and halves the gradient is taken
            let accept = v > ll
                || (v >= ll - 1e-10 * (1.0 + ll.abs())
                    && obj
                        .gradient(&l1, s1)
                        .is_ok_and(|(g1, xi1)| projected_norm(&g1, &xi1, &l1) < 0.5 * projected_norm(&g, &xi, &lambda)));
            if accept {
                lambda = l1;
                sigma = s1;
                ll = v;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        let (g1, xi1) = obj.gradient(&lambda, sigma)?;
        g = g1;
        xi = xi1;
        if !improved {
            break;
        }
    }
    let grad_norm = projected_norm(&g, &xi, &lambda);
    let psi = profile(&lambda, sigma, data)?.psi;
    Ok(MleFit {
        converged: grad_norm <= config.grad_tol * (1.0 + ll.abs()),
        lambda,
        psi: psi.iter().copied().collect(),
        sigma,
        loglik: ll,
        grad_norm,
        evals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaldResult {
    pub statistic: f64,
    /// Number of scale coordinates the statistic uses.
    pub df: usize,
    /// Scale coordinates with `λ̂ⱼ = 0`, whose information row is zero and
    /// which are left out.
    pub dropped: Vec<usize>,
}

impl WaldResult {
    pub fn degenerate(&self) -> bool {
        !self.dropped.is_empty()
    }
}

/// `(λ̂ − λ)ᵀ I^λ(θ̂) (λ̂ − λ)` with `I^λ = diag(λ̂) C diag(λ̂)` (efficient
/// with respect to `σ` when it is estimated). Coordinates with `λ̂ⱼ = 0`
/// have zero information; they are dropped and reported.
pub fn lmm_wald(lambda: &[f64], data: &LmmData, fit: &MleFit, mode: SigmaMode) -> Result<WaldResult> {
    data.check_lambda(lambda)?;
    let d1 = data.n_scales();
    let with_sigma = mode == SigmaMode::Unknown;
    let blocks = lmm_modified_info(&fit.lambda, fit.sigma, data, with_sigma)?;
    let n = blocks.lambda_block.nrows();
    let scale: Vec<f64> = (0..n).map(|a| if a < d1 { fit.lambda[a] } else { 1.0 }).collect();
    let full = DMatrix::from_fn(n, n, |a, b| scale[a] * blocks.lambda_block[(a, b)] * scale[b]);
    let info = if with_sigma {
        schur_complement(&full, &(0..d1).collect::<Vec<_>>())?
    } else {
        full
    };
    let keep: Vec<usize> = (0..d1).filter(|&j| fit.lambda[j] > 0.0).collect();
    let dropped: Vec<usize> = (0..d1).filter(|&j| fit.lambda[j] <= 0.0).collect();
    let mut stat = 0.0;
    for &a in &keep {
        for &b in &keep {
            stat += (fit.lambda[a] - lambda[a]) * info[(a, b)] * (fit.lambda[b] - lambda[b]);
        }
    }
    Ok(WaldResult {
        statistic: stat,
        df: keep.len(),
        dropped,
    })
}

/// `2{ℓ(θ̂) − max ℓ(λ, ·)}` with `ψ` (and an unknown `σ`) profiled out.
pub fn lmm_lrt(lambda: &[f64], data: &LmmData, fit: &MleFit, mode: SigmaMode) -> Result<f64> {
    data.check_lambda(lambda)?;
    let restricted = match mode {
        SigmaMode::Known(s) => profile(lambda, s, data)?.loglik,
        SigmaMode::Unknown => {
            let c = fit.sigma.ln();
            let (_, v) = golden_section(
                |ls| match profile(lambda, ls.exp(), data) {
                    Ok(p) => -p.loglik,
                    Err(_) => f64::INFINITY,
                },
                c - 6.0,
                c + 6.0,
                1e-10,
            );
            -v
        }
    };
    Ok(2.0 * (fit.loglik - restricted))
}

/// Wald standard errors of `(λ, ψ[, σ])` from the inverse expected
/// information at the fit; `None` for `λ̂ⱼ = 0`, whose information row is zero.
pub fn lmm_wald_se(data: &LmmData, fit: &MleFit, mode: SigmaMode) -> Result<Vec<Option<f64>>> {
    let d1 = data.n_scales();
    let blocks = lmm_modified_info(&fit.lambda, fit.sigma, data, mode == SigmaMode::Unknown)?;
    let full = blocks.assemble(&fit.lambda);
    let keep: Vec<usize> = (0..full.nrows()).filter(|&a| a >= d1 || fit.lambda[a] > 0.0).collect();
    let inv = PdFactor::new(&crate::linalg::submatrix(&full, &keep, &keep), crate::linalg::PIVOT_REL_TOL)?.inverse();
    let mut out = vec![None; full.nrows()];
    for (i, &a) in keep.iter().enumerate() {
        out[a] = Some(inv[(i, i)].max(0.0).sqrt());
    }
    Ok(out)
}

/// Same data with column `j` of X removed and `value · xⱼ` subtracted from y.
fn offset_fixed(data: &LmmData, j: usize, value: f64) -> Result<LmmData> {
    let groups = data
        .groups()
        .iter()
        .map(|g| {
            let y = g.y() - g.x().column(j) * value;
            LmmGroup::new(y, g.x().clone().remove_column(j), g.z().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    LmmData::new(groups, data.scale_map().to_vec())
}

/// `2{ℓ(θ̂) − max ℓ}` with coordinate `index` of `(λ, ψ[, σ])` held at
/// `value` and all others maximized.
pub fn lmm_profile_lrt(index: usize, value: f64, data: &LmmData, fit: &MleFit, mode: SigmaMode) -> Result<f64> {
    let d1 = data.n_scales();
    let d2 = data.n_fixed();
    let unknown = mode == SigmaMode::Unknown;
    let sigma_index = d1 + d2;
    if index >= sigma_index + usize::from(unknown) {
        return Err(Error::Dimension(format!("parameter index {index} out of range")));
    }
    if !value.is_finite() || (index < d1 && value < 0.0) || (index == sigma_index && value <= 0.0) {
        return Err(Error::Domain(format!("value {value} outside the parameter space")));
    }
    let reduced = if (d1..sigma_index).contains(&index) {
        Some(offset_fixed(data, index - d1, value)?)
    } else {
        None
    };
    let target = reduced.as_ref().unwrap_or(data);
    let free_lambda: Vec<usize> = (0..d1).filter(|&j| j != index).collect();
    let free_sigma = unknown && index != sigma_index;
    let fixed_sigma = match mode {
        SigmaMode::Known(s) => s,
        SigmaMode::Unknown => value,
    };
    let unpack = |u: &[f64]| {
        let mut lambda = vec![0.0; d1];
        if index < d1 {
            lambda[index] = value;
        }
        for (k, &j) in free_lambda.iter().enumerate() {
            lambda[j] = u[k].abs();
        }
        let sigma = if free_sigma { u[free_lambda.len()].exp() } else { fixed_sigma };
        (lambda, sigma)
    };
    let value_at = |u: &[f64]| {
        let (lambda, sigma) = unpack(u);
        match profile(&lambda, sigma, target) {
            Ok(p) if p.loglik.is_finite() => p.loglik,
            _ => f64::NEG_INFINITY,
        }
    };
    let start = |scale: f64| {
        let mut u: Vec<f64> = free_lambda.iter().map(|&j| scale * fit.lambda[j]).collect();
        if free_sigma {
            u.push(fit.sigma.ln());
        }
        u
    };
    let cfg = NelderMeadConfig {
        f_tol: 1e-11,
        x_tol: 1e-7,
        ..MleConfig::new(mode).nelder_mead
    };
    let best = [1.0, 0.0]
        .iter()
        .map(|&s| -nelder_mead(|u| -value_at(u), &start(s), &cfg).value)
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(Error::Domain("restricted likelihood could not be evaluated".into()));
    }
    Ok(2.0 * (fit.loglik - best))
}
