//! Random-intercept normal model `Y_ij = θ W_i + E_ij` with standard normal
//! `W_i` and `E_ij`. Everything is available in closed form, which makes it
//! the exact reference for the generic machinery.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::inference::ScoreModel;
use crate::param::{CriticalPattern, ParameterPoint};
use crate::rng::stream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `n × r` responses, one row per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    y: DMatrix<f64>,
}

impl ToyData {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(Error::Dimension("toy data needs n >= 1 and r >= 1".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("toy data must be finite".into()));
        }
        Ok(Self { y })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn r(&self) -> usize {
        self.y.ncols()
    }

    /// `yᵢᵀ1_r` for every group.
    pub fn row_sums(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.y.row_iter().map(|row| row.sum()))
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::Domain(format!("toy model needs theta >= 0, got {theta}")));
    }
    Ok(())
}

pub fn toy_loglik(theta: f64, data: &ToyData) -> Result<f64> {
    check_theta(theta)?;
    let r = data.r() as f64;
    let t2 = theta * theta;
    let denom = 1.0 + r * t2;
    let mut ll = -0.5 * (data.n() as f64) * r * LN_2PI;
    for row in data.y.row_iter() {
        let s = row.sum();
        ll += -0.5 * denom.ln() - 0.5 * (row.norm_squared() - s * s * t2 / denom);
    }
    Ok(ll)
}

/// Derivative of the log-likelihood in θ; identically zero at θ = 0.
pub fn toy_score(theta: f64, data: &ToyData) -> Result<f64> {
    check_theta(theta)?;
    let r = data.r() as f64;
    let denom = 1.0 + r * theta * theta;
    Ok(data
        .row_sums()
        .iter()
        .map(|s| -r * theta / denom + s * s * theta / (denom * denom))
        .sum())
}

/// Second derivative of the log-likelihood at θ = 0: `Σ (−r + (yᵢᵀ1)²)`.
pub fn toy_modified_score(data: &ToyData) -> f64 {
    let r = data.r() as f64;
    data.row_sums().iter().map(|s| s * s - r).sum()
}

/// `{−rn + Σ(yᵢᵀ1)²/(1+rθ²)}² / (2r²n)`, valid for every θ ≥ 0.
pub fn toy_statistic_closed_form(theta: f64, data: &ToyData) -> Result<f64> {
    check_theta(theta)?;
    let r = data.r() as f64;
    let n = data.n() as f64;
    let denom = 1.0 + r * theta * theta;
    let centred = -r * n + data.row_sums().iter().map(|s| s * s).sum::<f64>() / denom;
    Ok(centred * centred / (2.0 * r * r * n))
}

/// Draw `n` groups of size `r`; group `i` uses stream `i` under `seed`.
pub fn toy_simulate(theta: f64, n: usize, r: usize, seed: u64) -> Result<ToyData> {
    check_theta(theta)?;
    let mut y = DMatrix::zeros(n, r);
    for i in 0..n {
        let mut rng = stream(seed, i as u64);
        let w: f64 = StandardNormal.sample(&mut rng);
        for j in 0..r {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] = theta * w + e;
        }
    }
    ToyData::new(y)
}

/// The toy model as a [`ScoreModel`]: `θ` is the single scale parameter.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyModel;

impl ToyModel {
    pub fn theta(theta: f64) -> Result<ParameterPoint> {
        ParameterPoint::new(vec![theta], vec![], None)
    }
}

impl ScoreModel for ToyModel {
    type Data = ToyData;

    fn n_groups(&self, data: &ToyData) -> usize {
        data.n()
    }

    fn check_theta(&self, theta: &ParameterPoint, _data: &ToyData) -> Result<()> {
        if theta.n_scale() != 1 || theta.n_free() != 0 || theta.sigma().is_some() {
            return Err(Error::Dimension("toy model has exactly one scale parameter".into()));
        }
        Ok(())
    }

    fn group_modified_score(
        &self,
        theta: &ParameterPoint,
        pattern: &CriticalPattern,
        data: &ToyData,
        group: usize,
    ) -> Result<DVector<f64>> {
        let t = theta.lambda()[0];
        let r = data.r() as f64;
        let s = data.y.row(group).sum();
        let denom = 1.0 + r * t * t;
        let v = if pattern.is_critical(0) {
            // second derivative at t = 0; for t > 0 the full second derivative
            // of the group log-likelihood
            let s2 = s * s;
            -r * (1.0 - r * t * t) / (denom * denom) + s2 * (1.0 - 3.0 * r * t * t) / denom.powi(3)
        } else {
            t / denom * (-r + s * s / denom)
        };
        Ok(DVector::from_element(1, v))
    }

    fn modified_info(&self, theta: &ParameterPoint, pattern: &CriticalPattern, data: &ToyData) -> Result<DMatrix<f64>> {
        let t = theta.lambda()[0];
        let r = data.r() as f64;
        let n = data.n() as f64;
        let denom = 1.0 + r * t * t;
        let v = if pattern.is_critical(0) {
            // S²/(1+rθ²) = r χ²₁ under θ; the second derivative is affine in S²
            let slope = (1.0 - 3.0 * r * t * t) / denom.powi(3);
            2.0 * r * r * denom * denom * slope * slope
        } else {
            2.0 * r * r * t * t / (denom * denom)
        };
        Ok(DMatrix::from_element(1, 1, n * v))
    }

    fn loglik(&self, theta: &ParameterPoint, data: &ToyData) -> Result<f64> {
        toy_loglik(theta.lambda()[0], data)
    }

    fn simulate(&self, theta: &ParameterPoint, template: &ToyData, seed: u64) -> Result<ToyData> {
        toy_simulate(theta.lambda()[0], template.n(), template.r(), seed)
    }
}
