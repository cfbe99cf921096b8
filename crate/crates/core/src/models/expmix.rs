//! Exponential mixed model with a uniform random effect.
//!
//! Given `W ~ U(−√3, √3)` the two responses of an observation are
//! independent exponentials with rate `ψ + λW`. The marginal density depends
//! on the data only through `y• = y₁ + y₂`; with `c = ψy•` and `h = √3λy•`
//!
//! ```text
//! f(y) = e^{−c} Q(c, h) / y•²,   Q = (c² + h²) sinh(h)/h + 2(c + 1)(sinh(h)/h − cosh(h))
//! ```
//!
//! which is evaluated by power series for small `h` and through the
//! antiderivative `2hQ = e^h(a² + 2a + 2) − e^{−h}(b² + 2b + 2)`, `a = c − h`,
//! `b = c + h`, otherwise. No branch loses accuracy as `λ → 0`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::inference::ScoreModel;
use crate::param::{CriticalPattern, ParameterPoint};
use crate::quadrature::{gauss_laguerre, gauss_legendre, Rule};
use crate::rng::stream;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SERIES_TERMS: usize = 14;
const SERIES_SWITCH: f64 = 1.0;
const QUAD_NODES: usize = 64;

/// `n × 2` matrix of positive responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpMixData {
    y: DMatrix<f64>,
    y_bullet: Vec<f64>,
}

impl ExpMixData {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.ncols() != 2 || y.nrows() == 0 {
            return Err(Error::Dimension("exponential mixed data must be n x 2 with n >= 1".into()));
        }
        if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("exponential mixed responses must be finite and > 0".into()));
        }
        let y_bullet = y.row_iter().map(|r| r[0] + r[1]).collect();
        Ok(Self { y, y_bullet })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn y_bullet(&self) -> &[f64] {
        &self.y_bullet
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
}

/// Checks `λ ≥ 0` and `ψ > √3 λ`.
pub fn check_domain(lambda: f64, psi: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() || !psi.is_finite() || !(psi > SQRT3 * lambda) {
        return Err(Error::Domain(format!(
            "exponential mixed model needs lambda >= 0 and psi > sqrt(3) lambda, got ({lambda}, {psi})"
        )));
    }
    Ok(())
}

/// `log Q` and its partial derivatives in `c` and `h`.
#[derive(Debug, Clone, Copy)]
struct LogQ {
    value: f64,
    dc: f64,
    dh: f64,
    dhh: f64,
}

fn log_q(c: f64, h: f64) -> LogQ {
    if h < SERIES_SWITCH {
        // S1 = sinh h / h, A = S1 − cosh h, with derivatives in h
        let (mut s1, mut s1d, mut s1dd) = (1.0, 0.0, 0.0);
        let (mut a, mut ad, mut add) = (0.0, 0.0, 0.0);
        let h2 = h * h;
        let mut fact = 1.0; // (2k+1)!
        let mut pow = 1.0; // h^{2k}
        for k in 1..SERIES_TERMS {
            let kf = k as f64;
            fact *= (2.0 * kf) * (2.0 * kf + 1.0);
            let prev = pow; // h^{2k-2}
            pow *= h2;
            s1 += pow / fact;
            s1d += 2.0 * kf * prev * h / fact;
            s1dd += 2.0 * kf * (2.0 * kf - 1.0) * prev / fact;
            a -= 2.0 * kf * pow / fact;
            ad -= 4.0 * kf * kf * prev * h / fact;
            add -= 4.0 * kf * kf * (2.0 * kf - 1.0) * prev / fact;
        }
        let cc = c * c + h2;
        let q = cc * s1 + 2.0 * (c + 1.0) * a;
        let qc = 2.0 * c * s1 + 2.0 * a;
        let qh = 2.0 * h * s1 + cc * s1d + 2.0 * (c + 1.0) * ad;
        let qhh = 2.0 * s1 + 4.0 * h * s1d + cc * s1dd + 2.0 * (c + 1.0) * add;
        LogQ {
            value: q.ln(),
            dc: qc / q,
            dh: qh / q,
            dhh: (qhh * q - qh * qh) / (q * q),
        }
    } else {
        let a = c - h;
        let b = c + h;
        let e = (-2.0 * h).exp();
        let pa = a * a + 2.0 * a + 2.0;
        let pb = b * b + 2.0 * b + 2.0;
        // G̃ = e^{−h} · 2hQ
        let g = pa - e * pb;
        let gc = (2.0 * a + 2.0) - e * (2.0 * b + 2.0);
        let gh = a * a + e * b * b;
        let ghh = a * a - 2.0 * a - e * b * b + 2.0 * e * b;
        LogQ {
            value: h + g.ln() - (2.0 * h).ln(),
            dc: gc / g,
            dh: gh / g - 1.0 / h,
            dhh: (ghh * g - gh * gh) / (g * g) + 1.0 / (h * h),
        }
    }
}

/// Per-observation log-density.
fn obs_loglik(lambda: f64, psi: f64, yb: f64) -> f64 {
    let c = psi * yb;
    let h = SQRT3 * lambda * yb;
    -c + log_q(c, h).value - 2.0 * yb.ln()
}

/// Per-observation `(∂_λ, ∂²_λ, ∂_ψ)` of the log-density.
fn obs_derivatives(lambda: f64, psi: f64, yb: f64) -> (f64, f64, f64) {
    let c = psi * yb;
    let h = SQRT3 * lambda * yb;
    let q = log_q(c, h);
    let dl = SQRT3 * yb * q.dh;
    let dll = 3.0 * yb * yb * q.dhh;
    let dpsi = yb * (q.dc - 1.0);
    (dl, dll, dpsi)
}

/// Per-observation modified score `(∇^k λ, ∂_ψ)`.
fn obs_modified(lambda: f64, psi: f64, yb: f64, critical: bool) -> [f64; 2] {
    if critical && lambda == 0.0 {
        let d = yb - 2.0 / psi;
        return [d * d - 2.0 / (psi * psi), 2.0 / psi - yb];
    }
    let (dl, dll, dpsi) = obs_derivatives(lambda, psi, yb);
    [if critical { dll } else { dl }, dpsi]
}

pub fn expmix_loglik(lambda: f64, psi: f64, data: &ExpMixData) -> Result<f64> {
    check_domain(lambda, psi)?;
    Ok(data.y_bullet.iter().map(|&yb| obs_loglik(lambda, psi, yb)).sum())
}

/// `(s_λ, s_ψ)`; `s_λ` is exactly zero at `λ = 0`.
pub fn expmix_score(lambda: f64, psi: f64, data: &ExpMixData) -> Result<[f64; 2]> {
    check_domain(lambda, psi)?;
    let mut s = [0.0; 2];
    for &yb in &data.y_bullet {
        let (dl, _, dp) = obs_derivatives(lambda, psi, yb);
        s[0] += dl;
        s[1] += dp;
    }
    Ok(s)
}

/// Modified score: second derivative in `λ` on the critical line, the
/// ordinary score elsewhere.
pub fn expmix_modified_score(lambda: f64, psi: f64, data: &ExpMixData, pattern: &CriticalPattern) -> Result<[f64; 2]> {
    check_domain(lambda, psi)?;
    if pattern.dim() != 2 {
        return Err(Error::Dimension("exponential mixed pattern must have length 2".into()));
    }
    let critical = pattern.is_critical(0);
    let mut s = [0.0; 2];
    for &yb in &data.y_bullet {
        let v = obs_modified(lambda, psi, yb, critical);
        s[0] += v[0];
        s[1] += v[1];
    }
    Ok(s)
}

fn legendre_w() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(QUAD_NODES, -SQRT3, SQRT3))
}

fn laguerre_z() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| gauss_laguerre(QUAD_NODES, 1.0))
}

/// Log-likelihood by Gauss–Legendre quadrature over the random effect.
pub fn expmix_loglik_quadrature(lambda: f64, psi: f64, data: &ExpMixData) -> Result<f64> {
    check_domain(lambda, psi)?;
    let rule = legendre_w();
    Ok(data
        .y_bullet
        .iter()
        .map(|&yb| {
            let f = rule.integrate(|w| {
                let rho = psi + lambda * w;
                rho * rho * (-rho * yb).exp()
            });
            (f / (2.0 * SQRT3)).ln()
        })
        .sum())
}

/// Score by differentiating under the integral sign.
pub fn expmix_score_quadrature(lambda: f64, psi: f64, data: &ExpMixData) -> Result<[f64; 2]> {
    check_domain(lambda, psi)?;
    let rule = legendre_w();
    let mut s = [0.0; 2];
    for &yb in &data.y_bullet {
        let (mut f, mut dl, mut dp) = (0.0, 0.0, 0.0);
        for (&w, &wt) in rule.nodes.iter().zip(&rule.weights) {
            let rho = psi + lambda * w;
            let e = (-rho * yb).exp();
            let d_rho = (2.0 * rho - rho * rho * yb) * e;
            f += wt * rho * rho * e;
            dl += wt * w * d_rho;
            dp += wt * d_rho;
        }
        s[0] += dl / f;
        s[1] += dp / f;
    }
    Ok(s)
}

/// Per-observation covariance of the modified score, by quadrature over
/// `W` and `Y• | W ~ Gamma(2, ψ + λW)`.
fn info_quadrature(lambda: f64, psi: f64, critical: bool) -> DMatrix<f64> {
    let wr = legendre_w();
    let zr = laguerre_z();
    let mut m = [[0.0; 2]; 2];
    let mut mean = [0.0; 2];
    for (&w, &ww) in wr.nodes.iter().zip(&wr.weights) {
        let rho = psi + lambda * w;
        for (&z, &zw) in zr.nodes.iter().zip(&zr.weights) {
            let s = obs_modified(lambda, psi, z / rho, critical);
            let wt = ww * zw / (2.0 * SQRT3);
            for a in 0..2 {
                mean[a] += wt * s[a];
                for b in 0..2 {
                    m[a][b] += wt * s[a] * s[b];
                }
            }
        }
    }
    DMatrix::from_fn(2, 2, |a, b| {
        let v = m[a][b] - mean[a] * mean[b];
        if a == b {
            v
        } else {
            0.5 * (v + (m[b][a] - mean[a] * mean[b]))
        }
    })
}

/// Covariance of the summed modified score at `(λ, ψ)` over `n`
/// observations, pattern chosen by the exact zero rule.
pub fn expmix_modified_info(lambda: f64, psi: f64, n: usize) -> Result<DMatrix<f64>> {
    expmix_modified_info_with(lambda, psi, lambda == 0.0, n)
}

pub fn expmix_modified_info_with(lambda: f64, psi: f64, critical: bool, n: usize) -> Result<DMatrix<f64>> {
    check_domain(lambda, psi)?;
    let per = if lambda == 0.0 {
        let p2 = psi * psi;
        if critical {
            DMatrix::from_row_slice(2, 2, &[20.0 / (p2 * p2), -4.0 / (p2 * psi), -4.0 / (p2 * psi), 2.0 / p2])
        } else {
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0 / p2])
        }
    } else {
        info_quadrature(lambda, psi, critical)
    };
    Ok(per * n as f64)
}

/// `W ~ U(−√3, √3)` and `Y_j = −ln U_j / (ψ + λW)`; observation `i` draws from
/// stream `i` under `seed`.
pub fn expmix_simulate(lambda: f64, psi: f64, n: usize, seed: u64) -> Result<ExpMixData> {
    check_domain(lambda, psi)?;
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let mut rng = stream(seed, i as u64);
        let w = SQRT3 * (2.0 * rng.random::<f64>() - 1.0);
        let rate = psi + lambda * w;
        for j in 0..2 {
            let u = 1.0 - rng.random::<f64>();
            y[(i, j)] = -u.ln() / rate;
        }
    }
    // an exact zero draw has probability 2^-53 per cell; nudge it into the domain
    y.iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v = f64::MIN_POSITIVE;
        }
    });
    ExpMixData::new(y)
}

/// The exponential mixed model as a [`ScoreModel`] with `θ = (λ, ψ)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpMixModel;

impl ExpMixModel {
    pub fn theta(lambda: f64, psi: f64) -> Result<ParameterPoint> {
        check_domain(lambda, psi)?;
        ParameterPoint::new(vec![lambda], vec![psi], None)
    }
}

fn unpack(theta: &ParameterPoint) -> Result<(f64, f64)> {
    if theta.n_scale() != 1 || theta.n_free() != 1 || theta.sigma().is_some() {
        return Err(Error::Dimension("exponential mixed model has theta = (lambda, psi)".into()));
    }
    let (l, p) = (theta.lambda()[0], theta.psi()[0]);
    check_domain(l, p)?;
    Ok((l, p))
}

impl ScoreModel for ExpMixModel {
    type Data = ExpMixData;

    fn n_groups(&self, data: &ExpMixData) -> usize {
        data.n()
    }

    fn check_theta(&self, theta: &ParameterPoint, _data: &ExpMixData) -> Result<()> {
        unpack(theta).map(|_| ())
    }

    fn group_modified_score(
        &self,
        theta: &ParameterPoint,
        pattern: &CriticalPattern,
        data: &ExpMixData,
        group: usize,
    ) -> Result<DVector<f64>> {
        let (l, p) = unpack(theta)?;
        let v = obs_modified(l, p, data.y_bullet[group], pattern.is_critical(0));
        Ok(DVector::from_column_slice(&v))
    }

    fn modified_info(&self, theta: &ParameterPoint, pattern: &CriticalPattern, data: &ExpMixData) -> Result<DMatrix<f64>> {
        let (l, p) = unpack(theta)?;
        expmix_modified_info_with(l, p, pattern.is_critical(0), data.n())
    }

    fn loglik(&self, theta: &ParameterPoint, data: &ExpMixData) -> Result<f64> {
        let (l, p) = unpack(theta)?;
        expmix_loglik(l, p, data)
    }

    fn simulate(&self, theta: &ParameterPoint, template: &ExpMixData, seed: u64) -> Result<ExpMixData> {
        let (l, p) = unpack(theta)?;
        expmix_simulate(l, p, template.n(), seed)
    }
}
