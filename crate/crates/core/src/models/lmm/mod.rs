//! Linear mixed model `Yᵢ = Xᵢψ + ZᵢΛWᵢ + σEᵢ` with a diagonal scale matrix
//! `Λ` whose diagonal entries are drawn from the scale parameters `λ`.
//!
//! The marginal covariance is `Σᵢ = σ²I + Σⱼ λⱼ² Hⱼⁱ` with `Hⱼⁱ` the sum of
//! outer products of the columns of `Zᵢ` assigned to `λⱼ`. The score in `λⱼ`
//! factors as `λⱼ ξⱼ` where
//!
//! ```text
//! ξⱼ = Σᵢ εᵢᵀΣᵢ⁻¹HⱼⁱΣᵢ⁻¹εᵢ − tr(Σᵢ⁻¹Hⱼⁱ),
//! ```
//!
//! which equals the second derivative of the log-likelihood in `λⱼ` when
//! `λⱼ = 0`. Critical coordinates therefore use `ξⱼ` and regular ones
//! `λⱼξⱼ`, with information `C` or `DCD` for `D = diag(λ)`.

mod data;
mod fit;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};

pub use data::{LmmData, LmmGroup};
pub use fit::{
    lmm_gls, lmm_lrt, lmm_mle, lmm_ols, lmm_profile_loglik, lmm_profile_lrt, lmm_wald, lmm_wald_se, MleConfig, MleFit,
    WaldResult,
};

use crate::error::{Error, Result};
use crate::inference::{ScoreModel, TestResult};
use crate::linalg::{self, PdFactor, PIVOT_REL_TOL};
use crate::param::{critical_pattern, CriticalPattern, ParameterPoint};
use crate::rng::stream;
use data::GroupSummary;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Whether the error scale is a fixed constant or a model parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Known(f64),
    Unknown,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be finite and > 0, got {sigma}")));
    }
    Ok(())
}

/// `Σ = σ²I + Σⱼ λⱼ² Hⱼ` and the `Hⱼ`, formed densely.
pub fn build_sigma(
    lambda: &[f64],
    sigma: f64,
    z: &DMatrix<f64>,
    scale_map: &[usize],
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    check_sigma(sigma)?;
    if z.ncols() != scale_map.len() {
        return Err(Error::Dimension("scale map length must equal the number of Z columns".into()));
    }
    if let Some(&j) = scale_map.iter().find(|&&j| j >= lambda.len()) {
        return Err(Error::Dimension(format!("scale map refers to parameter {j}")));
    }
    let r = z.nrows();
    let mut h = vec![DMatrix::zeros(r, r); lambda.len()];
    for (k, &j) in scale_map.iter().enumerate() {
        let col = z.column(k);
        h[j] += &col * col.transpose();
    }
    let mut s = DMatrix::identity(r, r) * (sigma * sigma);
    for (j, hj) in h.iter().enumerate() {
        s += hj * (lambda[j] * lambda[j]);
    }
    Ok((s, h))
}

/// Inverse and log-determinant of one group's `Σ` through the `q × q`
/// matrix `K = σ²I + ΛZᵀZΛ`:
/// `Σ⁻¹ = σ⁻²(I − ZΛK⁻¹ΛZᵀ)` and `log|Σ| = 2(r − q) log σ + log|K|`.
pub(crate) struct GroupCov<'a> {
    s: &'a GroupSummary,
    r: usize,
    sigma2: f64,
    lam: &'a DVector<f64>,
    k: Cholesky<f64, Dyn>,
    /// `K⁻¹ΛGΛ`
    p: DMatrix<f64>,
    pub logdet: f64,
}

impl<'a> GroupCov<'a> {
    pub fn new(s: &'a GroupSummary, r: usize, lam: &'a DVector<f64>, sigma: f64) -> Result<Self> {
        let q = lam.len();
        let sigma2 = sigma * sigma;
        let lgl = DMatrix::from_fn(q, q, |a, b| lam[a] * s.ztz[(a, b)] * lam[b]);
        let kmat = DMatrix::identity(q, q) * sigma2 + &lgl;
        let k = Cholesky::new(kmat).ok_or_else(|| Error::Domain("covariance factorization failed".into()))?;
        let logdet_k = 2.0 * k.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let p = k.solve(&lgl);
        Ok(Self {
            s,
            r,
            sigma2,
            lam,
            k,
            p,
            logdet: (r as f64 - q as f64) * sigma2.ln() + logdet_k,
        })
    }

    fn scale_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (a, mut row) in out.row_iter_mut().enumerate() {
            row *= self.lam[a];
        }
        out
    }

    /// `UᵀΣ⁻¹V` from `UᵀV`, `ZᵀU` and `ZᵀV`.
    pub fn inv_form(&self, utv: &DMatrix<f64>, ztu: &DMatrix<f64>, ztv: &DMatrix<f64>) -> DMatrix<f64> {
        let lu = self.scale_rows(ztu);
        let lv = self.scale_rows(ztv);
        (utv - lu.tr_mul(&self.k.solve(&lv))) / self.sigma2
    }

    /// `UᵀΣ⁻²V` from the same cross-products.
    pub fn inv2_form(&self, utv: &DMatrix<f64>, ztu: &DMatrix<f64>, ztv: &DMatrix<f64>) -> DMatrix<f64> {
        let lu = self.scale_rows(ztu);
        let lv = self.scale_rows(ztv);
        let a = self.k.solve(&lu);
        let b = self.k.solve(&lv);
        let lgl = DMatrix::from_fn(self.lam.len(), self.lam.len(), |i, j| {
            self.lam[i] * self.s.ztz[(i, j)] * self.lam[j]
        });
        (utv - a.tr_mul(&lv) - lu.tr_mul(&b) + a.tr_mul(&(lgl * b))) / (self.sigma2 * self.sigma2)
    }

    pub fn trace_inv(&self) -> f64 {
        (self.r as f64 - self.p.trace()) / self.sigma2
    }

    pub fn trace_inv2(&self) -> f64 {
        (self.r as f64 - 2.0 * self.p.trace() + (&self.p * &self.p).trace()) / (self.sigma2 * self.sigma2)
    }

    /// `ZᵀΣ⁻¹Z`
    pub fn m(&self) -> DMatrix<f64> {
        self.inv_form(&self.s.ztz, &self.s.ztz, &self.s.ztz)
    }
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Residual cross-products `(Zᵀε, Xᵀε, εᵀε)` from the raw group data.
fn residuals(g: &LmmGroup, psi: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let e = g.y() - g.x() * psi;
    (g.z().tr_mul(&e), g.x().tr_mul(&e), e.norm_squared())
}

/// Per-group contributions at `(λ, ψ, σ)`.
#[derive(Debug, Clone)]
pub(crate) struct GroupTerms {
    pub loglik: f64,
    pub xi: DVector<f64>,
    pub s_psi: DVector<f64>,
    /// `∂ℓ/∂σ`
    pub s_sigma: f64,
}

pub(crate) fn group_terms(
    data: &LmmData,
    g: &LmmGroup,
    lam_cols: &DVector<f64>,
    psi: &DVector<f64>,
    sigma: f64,
    with_sigma: bool,
) -> Result<GroupTerms> {
    let cov = GroupCov::new(&g.summary, g.len(), lam_cols, sigma)?;
    let (zte, xte, ete) = residuals(g, psi);
    let ztz = &g.summary.ztz;
    let ze = col(&zte);
    let quad = cov.inv_form(&DMatrix::from_element(1, 1, ete), &ze, &ze)[(0, 0)];
    let loglik = -0.5 * (g.len() as f64 * LN_2PI + cov.logdet + quad);
    // u = ZᵀΣ⁻¹ε, M = ZᵀΣ⁻¹Z
    let u = cov.inv_form(&ze, ztz, &ze);
    let m = cov.m();
    let mut xi = DVector::zeros(data.n_scales());
    for (k, &j) in data.scale_map().iter().enumerate() {
        xi[j] += u[(k, 0)] * u[(k, 0)] - m[(k, k)];
    }
    let s_psi = cov.inv_form(&col(&xte), &g.summary.ztx, &ze).column(0).into_owned();
    let s_sigma = if with_sigma {
        let e2 = cov.inv2_form(&DMatrix::from_element(1, 1, ete), &ze, &ze)[(0, 0)];
        sigma * (e2 - cov.trace_inv())
    } else {
        0.0
    };
    Ok(GroupTerms {
        loglik,
        xi,
        s_psi,
        s_sigma,
    })
}

fn check_point(lambda: &[f64], psi: &[f64], sigma: f64, data: &LmmData) -> Result<()> {
    data.check_lambda(lambda)?;
    data.check_psi(psi)?;
    check_sigma(sigma)
}

fn sum_terms(lambda: &[f64], psi: &[f64], sigma: f64, data: &LmmData, with_sigma: bool) -> Result<GroupTerms> {
    check_point(lambda, psi, sigma, data)?;
    let lam = data.column_scales(lambda);
    let psi = DVector::from_column_slice(psi);
    let mut total = GroupTerms {
        loglik: 0.0,
        xi: DVector::zeros(data.n_scales()),
        s_psi: DVector::zeros(data.n_fixed()),
        s_sigma: 0.0,
    };
    for g in data.groups() {
        let t = group_terms(data, g, &lam, &psi, sigma, with_sigma)?;
        total.loglik += t.loglik;
        total.xi += t.xi;
        total.s_psi += t.s_psi;
        total.s_sigma += t.s_sigma;
    }
    Ok(total)
}

pub fn lmm_loglik(lambda: &[f64], psi: &[f64], sigma: f64, data: &LmmData) -> Result<f64> {
    check_point(lambda, psi, sigma, data)?;
    let lam = data.column_scales(lambda);
    let psi = DVector::from_column_slice(psi);
    let mut ll = 0.0;
    for g in data.groups() {
        let cov = GroupCov::new(&g.summary, g.len(), &lam, sigma)?;
        let (zte, _, ete) = residuals(g, &psi);
        let ze = col(&zte);
        let quad = cov.inv_form(&DMatrix::from_element(1, 1, ete), &ze, &ze)[(0, 0)];
        ll += -0.5 * (g.len() as f64 * LN_2PI + cov.logdet + quad);
    }
    Ok(ll)
}

/// The λ-cancelled scores `ξ`.
pub fn lmm_xi(lambda: &[f64], psi: &[f64], sigma: f64, data: &LmmData) -> Result<DVector<f64>> {
    Ok(sum_terms(lambda, psi, sigma, data, false)?.xi)
}

/// Full score at `(λ, ψ, σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmScore {
    /// `s_λⱼ = λⱼ ξⱼ`
    pub lambda: DVector<f64>,
    pub xi: DVector<f64>,
    pub psi: DVector<f64>,
    pub sigma: f64,
}

pub fn lmm_score(lambda: &[f64], psi: &[f64], sigma: f64, data: &LmmData) -> Result<LmmScore> {
    let t = sum_terms(lambda, psi, sigma, data, true)?;
    let s_lambda = DVector::from_iterator(lambda.len(), lambda.iter().zip(t.xi.iter()).map(|(l, x)| l * x));
    Ok(LmmScore {
        lambda: s_lambda,
        xi: t.xi,
        psi: t.s_psi,
        sigma: t.s_sigma,
    })
}

/// Expected covariance of `(ξ[, s_σ])` and of `s_ψ`; the cross block between
/// them is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoBlocks {
    /// `d₁ × d₁`, or `(d₁ + 1) × (d₁ + 1)` with the σ row and column last.
    pub lambda_block: DMatrix<f64>,
    pub psi_block: DMatrix<f64>,
    pub has_sigma: bool,
}

impl InfoBlocks {
    /// `C`, the covariance of `ξ`.
    pub fn xi_block(&self) -> DMatrix<f64> {
        let d1 = self.n_scales();
        self.lambda_block.view((0, 0), (d1, d1)).into_owned()
    }

    pub fn n_scales(&self) -> usize {
        self.lambda_block.nrows() - usize::from(self.has_sigma)
    }

    /// Full matrix in `(λ, ψ, σ)` order after scaling the `λ` rows and
    /// columns by `scale` (1 for critical coordinates, `λⱼ` otherwise).
    pub fn assemble(&self, scale: &[f64]) -> DMatrix<f64> {
        let d1 = self.n_scales();
        let d2 = self.psi_block.nrows();
        let d = d1 + d2 + usize::from(self.has_sigma);
        let map = |a: usize| if a < d1 { a } else { d1 + d2 };
        let f = |a: usize| if a < d1 { scale[a] } else { 1.0 };
        let mut out = DMatrix::zeros(d, d);
        let nb = self.lambda_block.nrows();
        for a in 0..nb {
            for b in 0..nb {
                out[(map(a), map(b))] = f(a) * self.lambda_block[(a, b)] * f(b);
            }
        }
        out.view_mut((d1, d1), (d2, d2)).copy_from(&self.psi_block);
        out
    }
}

fn group_info(data: &LmmData, g: &LmmGroup, lam: &DVector<f64>, sigma: f64, with_sigma: bool) -> Result<InfoBlocks> {
    let d1 = data.n_scales();
    let nb = d1 + usize::from(with_sigma);
    let cov = GroupCov::new(&g.summary, g.len(), lam, sigma)?;
    let m = cov.m();
    let map = data.scale_map();
    let mut lb = DMatrix::zeros(nb, nb);
    for (k, &j) in map.iter().enumerate() {
        for (l, &i) in map.iter().enumerate() {
            lb[(j, i)] += 2.0 * m[(k, l)] * m[(k, l)];
        }
    }
    if with_sigma {
        let ztz = &g.summary.ztz;
        let n2 = cov.inv2_form(ztz, ztz, ztz);
        for (k, &j) in map.iter().enumerate() {
            lb[(j, d1)] += 2.0 * sigma * n2[(k, k)];
        }
        for j in 0..d1 {
            lb[(d1, j)] = lb[(j, d1)];
        }
        lb[(d1, d1)] = 2.0 * sigma * sigma * cov.trace_inv2();
    }
    let ztx = &g.summary.ztx;
    let psi_block = linalg::symmetrize(&cov.inv_form(&g.summary.xtx, ztx, ztx));
    Ok(InfoBlocks {
        lambda_block: lb,
        psi_block,
        has_sigma: with_sigma,
    })
}

/// Information blocks for one group.
pub fn lmm_modified_info_group(
    lambda: &[f64],
    sigma: f64,
    data: &LmmData,
    group: usize,
    with_sigma: bool,
) -> Result<InfoBlocks> {
    data.check_lambda(lambda)?;
    check_sigma(sigma)?;
    let g = data
        .groups()
        .get(group)
        .ok_or_else(|| Error::Dimension(format!("group index {group} out of range")))?;
    group_info(data, g, &data.column_scales(lambda), sigma, with_sigma)
}

/// Summed information blocks; independent of `ψ`.
pub fn lmm_modified_info(lambda: &[f64], sigma: f64, data: &LmmData, with_sigma: bool) -> Result<InfoBlocks> {
    data.check_lambda(lambda)?;
    check_sigma(sigma)?;
    let lam = data.column_scales(lambda);
    let d1 = data.n_scales();
    let nb = d1 + usize::from(with_sigma);
    let mut total = InfoBlocks {
        lambda_block: DMatrix::zeros(nb, nb),
        psi_block: DMatrix::zeros(data.n_fixed(), data.n_fixed()),
        has_sigma: with_sigma,
    };
    for g in data.groups() {
        let b = group_info(data, g, &lam, sigma, with_sigma)?;
        total.lambda_block += b.lambda_block;
        total.psi_block += b.psi_block;
    }
    Ok(total)
}

/// `ξᵀC⁻¹ξ` at `(λ, ψ̂)` with `σ` held fixed, `df = d₁`. This is the score
/// statistic for `λ` alone and, through the cancellation of `λ`, its
/// continuous extension wherever some `λⱼ = 0`.
pub fn lmm_modified_statistic_lambda(lambda: &[f64], psi_hat: &[f64], sigma: f64, data: &LmmData) -> Result<TestResult> {
    let xi = lmm_xi(lambda, psi_hat, sigma, data)?;
    let c = lmm_modified_info(lambda, sigma, data, false)?.lambda_block;
    let f = PdFactor::new(&c, PIVOT_REL_TOL)?;
    let pattern = critical_pattern(&ParameterPoint::new(lambda.to_vec(), vec![], None)?, 0.0);
    TestResult::new(f.quad_form(&xi), lambda.len(), &pattern, linalg::condition_number(&c))
}

/// Draw new responses under `(λ, ψ, σ)` keeping the designs of `template`;
/// group `i` uses stream `i` under `seed` (random effects first, then errors).
pub fn lmm_simulate(lambda: &[f64], psi: &[f64], sigma: f64, template: &LmmData, seed: u64) -> Result<LmmData> {
    check_point(lambda, psi, sigma, template)?;
    let lam = template.column_scales(lambda);
    let psi = DVector::from_column_slice(psi);
    let ys = template
        .groups()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = stream(seed, i as u64);
            let w = DVector::from_fn(lam.len(), |k, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                lam[k] * v
            });
            let e = DVector::from_fn(g.len(), |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                sigma * v
            });
            g.x() * &psi + g.z() * w + e
        })
        .collect();
    template.with_responses(ys)
}

/// The linear mixed model as a [`ScoreModel`] with `θ = (λ, ψ)` or
/// `θ = (λ, ψ, σ)` depending on the σ mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmmModel {
    pub sigma: SigmaMode,
}

impl LmmModel {
    pub fn known_sigma(sigma: f64) -> Self {
        Self {
            sigma: SigmaMode::Known(sigma),
        }
    }

    pub fn unknown_sigma() -> Self {
        Self {
            sigma: SigmaMode::Unknown,
        }
    }

    pub fn with_sigma(&self) -> bool {
        self.sigma == SigmaMode::Unknown
    }

    /// Parameter point for this mode; `sigma` is ignored when known.
    pub fn theta(&self, lambda: &[f64], psi: &[f64], sigma: f64) -> Result<ParameterPoint> {
        ParameterPoint::new(lambda.to_vec(), psi.to_vec(), self.with_sigma().then_some(sigma))
    }

    fn sigma_of(&self, theta: &ParameterPoint) -> f64 {
        match self.sigma {
            SigmaMode::Known(s) => s,
            SigmaMode::Unknown => theta.sigma().unwrap_or(f64::NAN),
        }
    }

    fn scale_factors(theta: &ParameterPoint, pattern: &CriticalPattern) -> Vec<f64> {
        theta
            .lambda()
            .iter()
            .enumerate()
            .map(|(j, &l)| if pattern.is_critical(j) { 1.0 } else { l })
            .collect()
    }
}

impl ScoreModel for LmmModel {
    type Data = LmmData;

    fn n_groups(&self, data: &LmmData) -> usize {
        data.n_groups()
    }

    fn check_theta(&self, theta: &ParameterPoint, data: &LmmData) -> Result<()> {
        if theta.sigma().is_some() != self.with_sigma() {
            return Err(Error::Dimension(match self.sigma {
                SigmaMode::Known(_) => "sigma is known; theta must not carry it".into(),
                SigmaMode::Unknown => "sigma is unknown; theta must carry it".into(),
            }));
        }
        check_point(theta.lambda(), theta.psi(), self.sigma_of(theta), data)
    }

    fn group_modified_score(
        &self,
        theta: &ParameterPoint,
        pattern: &CriticalPattern,
        data: &LmmData,
        group: usize,
    ) -> Result<DVector<f64>> {
        let sigma = self.sigma_of(theta);
        let lam = data.column_scales(theta.lambda());
        let psi = DVector::from_column_slice(theta.psi());
        let t = group_terms(data, &data.groups()[group], &lam, &psi, sigma, self.with_sigma())?;
        let scale = Self::scale_factors(theta, pattern);
        let mut v = DVector::zeros(theta.dim());
        for j in 0..data.n_scales() {
            v[j] = scale[j] * t.xi[j];
        }
        let d1 = data.n_scales();
        v.rows_mut(d1, data.n_fixed()).copy_from(&t.s_psi);
        if self.with_sigma() {
            v[theta.dim() - 1] = t.s_sigma;
        }
        Ok(v)
    }

    fn modified_info(&self, theta: &ParameterPoint, pattern: &CriticalPattern, data: &LmmData) -> Result<DMatrix<f64>> {
        let blocks = lmm_modified_info(theta.lambda(), self.sigma_of(theta), data, self.with_sigma())?;
        Ok(blocks.assemble(&Self::scale_factors(theta, pattern)))
    }

    fn loglik(&self, theta: &ParameterPoint, data: &LmmData) -> Result<f64> {
        lmm_loglik(theta.lambda(), theta.psi(), self.sigma_of(theta), data)
    }

    fn simulate(&self, theta: &ParameterPoint, template: &LmmData, seed: u64) -> Result<LmmData> {
        lmm_simulate(theta.lambda(), theta.psi(), self.sigma_of(theta), template, seed)
    }
}
