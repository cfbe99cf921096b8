//! Partitioned parameter vectors and critical derivative patterns.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which block of the partition a flat coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    /// Scale parameter multiplying unit-variance random effects.
    Scale,
    /// Unconstrained parameter (fixed effects and the like).
    Free,
    /// Error standard deviation.
    Sigma,
}

/// A parameter `θ = (λ, ψ[, σ])`, flattened in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    lambda: Vec<f64>,
    psi: Vec<f64>,
    sigma: Option<f64>,
}

impl ParameterPoint {
    pub fn new(lambda: Vec<f64>, psi: Vec<f64>, sigma: Option<f64>) -> Result<Self> {
        if let Some((j, l)) = lambda.iter().enumerate().find(|(_, l)| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::Domain(format!("scale parameter {j} must be finite and >= 0, got {l}")));
        }
        if let Some(s) = sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Domain(format!("sigma must be > 0, got {s}")));
            }
        }
        if psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("free parameters must be finite".into()));
        }
        Ok(Self { lambda, psi, sigma })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn n_scale(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_free(&self) -> usize {
        self.psi.len()
    }

    pub fn dim(&self) -> usize {
        self.lambda.len() + self.psi.len() + usize::from(self.sigma.is_some())
    }

    /// Map a flat index to `(block, index within block)`.
    pub fn locate(&self, flat: usize) -> Option<(Block, usize)> {
        let d1 = self.lambda.len();
        let d2 = self.psi.len();
        if flat < d1 {
            Some((Block::Scale, flat))
        } else if flat < d1 + d2 {
            Some((Block::Free, flat - d1))
        } else if flat == d1 + d2 && self.sigma.is_some() {
            Some((Block::Sigma, 0))
        } else {
            None
        }
    }

    pub fn flat_index(&self, block: Block, within: usize) -> Option<usize> {
        let d1 = self.lambda.len();
        let d2 = self.psi.len();
        match block {
            Block::Scale if within < d1 => Some(within),
            Block::Free if within < d2 => Some(d1 + within),
            Block::Sigma if within == 0 && self.sigma.is_some() => Some(d1 + d2),
            _ => None,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.lambda);
        v.extend_from_slice(&self.psi);
        if let Some(s) = self.sigma {
            v.push(s);
        }
        v
    }

    pub fn get(&self, flat: usize) -> Option<f64> {
        match self.locate(flat)? {
            (Block::Scale, j) => Some(self.lambda[j]),
            (Block::Free, j) => Some(self.psi[j]),
            (Block::Sigma, _) => self.sigma,
        }
    }

    /// Copy with one flat coordinate replaced, re-validating the domain.
    pub fn with(&self, flat: usize, value: f64) -> Result<Self> {
        let mut out = self.clone();
        match self
            .locate(flat)
            .ok_or_else(|| Error::Dimension(format!("flat index {flat} out of range {}", self.dim())))?
        {
            (Block::Scale, j) => out.lambda[j] = value,
            (Block::Free, j) => out.psi[j] = value,
            (Block::Sigma, _) => out.sigma = Some(value),
        }
        Self::new(out.lambda, out.psi, out.sigma)
    }

    pub fn with_lambda(&self, lambda: Vec<f64>) -> Result<Self> {
        Self::new(lambda, self.psi.clone(), self.sigma)
    }

    pub fn with_psi(&self, psi: Vec<f64>) -> Result<Self> {
        Self::new(self.lambda.clone(), psi, self.sigma)
    }

    /// Rebuild from a flat vector with the same block layout.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.dim() {
            return Err(Error::Dimension(format!("expected {} values, got {}", self.dim(), flat.len())));
        }
        let d1 = self.lambda.len();
        let d2 = self.psi.len();
        Self::new(
            flat[..d1].to_vec(),
            flat[d1..d1 + d2].to_vec(),
            self.sigma.map(|_| flat[d1 + d2]),
        )
    }

    pub fn scale_indices(&self) -> Vec<usize> {
        (0..self.lambda.len()).collect()
    }
}

/// Derivative orders `k_j ∈ {1, 2}` per flat coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPattern {
    k: Vec<u8>,
    /// Orthonormal basis when the critical vectors are not standard basis
    /// vectors (columns are basis vectors).
    #[serde(skip)]
    basis: Option<DMatrix<f64>>,
}

impl CriticalPattern {
    /// All-ones pattern: the ordinary score.
    pub fn regular(dim: usize) -> Self {
        Self { k: vec![1; dim], basis: None }
    }

    pub fn from_orders(theta: &ParameterPoint, k: Vec<u8>) -> Result<Self> {
        if k.len() != theta.dim() {
            return Err(Error::Dimension(format!("pattern length {} != dim {}", k.len(), theta.dim())));
        }
        for (j, &kj) in k.iter().enumerate() {
            match (kj, theta.locate(j)) {
                (1, _) => {}
                (2, Some((Block::Scale, _))) => {}
                (2, _) => {
                    return Err(Error::Domain(format!("order 2 is only allowed for scale parameters (index {j})")))
                }
                _ => return Err(Error::Unsupported(format!("derivative order {kj} at index {j}"))),
            }
        }
        Ok(Self { k, basis: None })
    }

    /// Attach a numerically determined orthonormal basis.
    pub fn with_basis(mut self, basis: DMatrix<f64>) -> Result<Self> {
        let d = self.k.len();
        if basis.nrows() != d || basis.ncols() != d {
            return Err(Error::Dimension(format!("basis must be {d}x{d}")));
        }
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if err > 1e-10 {
            return Err(Error::Domain(format!("basis is not orthonormal (Gram error {err:e})")));
        }
        self.basis = Some(basis);
        Ok(self)
    }

    pub fn orders(&self) -> &[u8] {
        &self.k
    }

    pub fn order(&self, flat: usize) -> u8 {
        self.k[flat]
    }

    pub fn is_critical(&self, flat: usize) -> bool {
        self.k[flat] == 2
    }

    pub fn critical_indices(&self) -> Vec<usize> {
        self.k.iter().enumerate().filter(|(_, &k)| k == 2).map(|(j, _)| j).collect()
    }

    pub fn basis_vectors_are_standard(&self) -> bool {
        self.basis.is_none()
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }
}

/// Scale coordinates at (or within `zero_tol` of) zero get order 2.
pub fn critical_pattern(theta: &ParameterPoint, zero_tol: f64) -> CriticalPattern {
    let mut k = vec![1u8; theta.dim()];
    for (j, &l) in theta.lambda().iter().enumerate() {
        if l <= zero_tol {
            k[j] = 2;
        }
    }
    CriticalPattern { k, basis: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lambda: &[f64], psi: &[f64]) -> ParameterPoint {
        ParameterPoint::new(lambda.to_vec(), psi.to_vec(), None).unwrap()
    }

    #[test]
    fn pattern_examples() {
        assert_eq!(critical_pattern(&pt(&[0.0, 0.5], &[1.0, 1.0]), 0.0).orders(), &[2, 1, 1, 1]);
        assert_eq!(critical_pattern(&pt(&[0.3, 0.3], &[1.0, 1.0]), 0.0).orders(), &[1, 1, 1, 1]);
        let p = critical_pattern(&pt(&[1e-12, 0.5], &[1.0, 1.0]), 1e-10);
        assert_eq!(p.orders(), &[2, 1, 1, 1]);
        assert!(p.basis_vectors_are_standard());
        assert_eq!(p.critical_indices(), vec![0]);
        // exact rule by default leaves tiny positives regular
        assert_eq!(critical_pattern(&pt(&[1e-12, 0.5], &[1.0, 1.0]), 0.0).orders(), &[1, 1, 1, 1]);
    }

    #[test]
    fn domain_is_enforced() {
        assert!(ParameterPoint::new(vec![-0.1], vec![], None).is_err());
        assert!(ParameterPoint::new(vec![0.1], vec![], Some(0.0)).is_err());
        assert!(ParameterPoint::new(vec![0.0], vec![], Some(1.0)).is_ok());
    }

    #[test]
    fn order_two_only_on_scales() {
        let th = ParameterPoint::new(vec![0.0], vec![1.0], Some(1.0)).unwrap();
        assert!(CriticalPattern::from_orders(&th, vec![2, 1, 1]).is_ok());
        assert!(CriticalPattern::from_orders(&th, vec![1, 2, 1]).is_err());
        assert!(CriticalPattern::from_orders(&th, vec![1, 1, 2]).is_err());
    }

    #[test]
    fn basis_must_be_orthonormal() {
        let th = pt(&[0.0, 0.1], &[]);
        let p = CriticalPattern::from_orders(&th, vec![2, 1]).unwrap();
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let rot = DMatrix::from_row_slice(2, 2, &[c, -c, c, c]);
        assert!(p.clone().with_basis(rot).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(p.with_basis(bad).is_err());
    }

    proptest! {
        #[test]
        fn flat_index_round_trips(
            lambda in prop::collection::vec(0.0f64..5.0, 0..4),
            psi in prop::collection::vec(-5.0f64..5.0, 0..4),
            sigma in prop::option::of(0.1f64..3.0),
        ) {
            let th = ParameterPoint::new(lambda.clone(), psi.clone(), sigma).unwrap();
            prop_assert_eq!(th.dim(), lambda.len() + psi.len() + usize::from(sigma.is_some()));
            for j in 0..th.dim() {
                let (b, w) = th.locate(j).unwrap();
                prop_assert_eq!(th.flat_index(b, w), Some(j));
            }
            prop_assert!(th.locate(th.dim()).is_none());
            let back = th.from_flat_like(&th.to_flat()).unwrap();
            prop_assert_eq!(back, th);
        }
    }
}
