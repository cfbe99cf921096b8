//! Model-agnostic modified score machinery.
//!
//! A [`ScoreModel`] supplies per-group modified score contributions for a
//! given [`CriticalPattern`] together with the expected covariance of their
//! sum. Everything here is built from those two pieces: the continuous
//! extension `s̃ᵀ Ĩ⁻¹ s̃` of the score statistic, the efficient-information
//! version for sub-vectors, and numeric detection of critical directions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::chisq::chisq_sf;
use crate::error::{Error, Result};
use crate::linalg::{self, PdFactor, PIVOT_REL_TOL};
use crate::param::{critical_pattern, CriticalPattern, ParameterPoint};

/// Contract implemented by each model family.
pub trait ScoreModel: Sync {
    type Data: Sync;

    fn n_groups(&self, data: &Self::Data) -> usize;

    /// Domain and shape checks for `theta` against this model and data.
    fn check_theta(&self, theta: &ParameterPoint, data: &Self::Data) -> Result<()>;

    /// The d-vector whose j-th entry is the `k_j`-th partial derivative of
    /// group `group`'s log-likelihood in coordinate j.
    fn group_modified_score(
        &self,
        theta: &ParameterPoint,
        pattern: &CriticalPattern,
        data: &Self::Data,
        group: usize,
    ) -> Result<DVector<f64>>;

    /// Expected covariance of the summed modified score under `theta`.
    fn modified_info(
        &self,
        theta: &ParameterPoint,
        pattern: &CriticalPattern,
        data: &Self::Data,
    ) -> Result<DMatrix<f64>>;

    fn loglik(&self, theta: &ParameterPoint, data: &Self::Data) -> Result<f64>;

    /// Fresh responses drawn under `theta`, keeping whatever design the
    /// template carries (group count, predictors, ...).
    fn simulate(&self, theta: &ParameterPoint, template: &Self::Data, seed: u64) -> Result<Self::Data>;

    /// Summed modified score; models may override with a faster path.
    fn total_modified_score(
        &self,
        theta: &ParameterPoint,
        pattern: &CriticalPattern,
        data: &Self::Data,
    ) -> Result<DVector<f64>> {
        let mut total = DVector::zeros(theta.dim());
        for g in 0..self.n_groups(data) {
            total += self.group_modified_score(theta, pattern, data, g)?;
        }
        Ok(total)
    }
}

/// Modified score and its expected covariance at one parameter point.
#[derive(Debug, Clone)]
pub struct ModifiedScore {
    pub value: DVector<f64>,
    pub info: DMatrix<f64>,
    pub n_groups: usize,
    pub pattern: CriticalPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// Cross information between interest and nuisance coordinates is not
    /// small relative to the interest block; the plug-in efficient
    /// information is heuristic here.
    NonOrthogonalNuisance { cross_norm: f64, interest_min_eig: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub pattern: Vec<u8>,
    pub condition_number: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl TestResult {
    pub fn new(statistic: f64, df: usize, pattern: &CriticalPattern, condition_number: f64) -> Result<Self> {
        let statistic = statistic.max(0.0);
        Ok(Self {
            statistic,
            df,
            p_value: chisq_sf(df, statistic)?,
            pattern: pattern.orders().to_vec(),
            condition_number,
            diagnostics: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StatOptions {
    /// Scale coordinates at or below this value use second derivatives.
    pub zero_tol: f64,
    /// Fraction of the smallest interest-block eigenvalue above which the
    /// largest singular value of the cross block triggers a diagnostic.
    pub nonorthogonal_fraction: f64,
    /// Sub-vector statistics use the efficient score `s_I − Ĩ_IR Ĩ_RR⁻¹ s_R`
    /// instead of `s_I`. Needed when the nuisance values are unrestricted
    /// estimates rather than known or estimated under the tested value.
    pub project_nuisance: bool,
}

impl Default for StatOptions {
    fn default() -> Self {
        Self {
            zero_tol: 0.0,
            nonorthogonal_fraction: 0.1,
            project_nuisance: false,
        }
    }
}

pub fn modified_score<M: ScoreModel>(
    model: &M,
    theta: &ParameterPoint,
    pattern: &CriticalPattern,
    data: &M::Data,
) -> Result<ModifiedScore> {
    if !pattern.basis_vectors_are_standard() {
        return Err(Error::Unsupported(
            "modified scores along non-standard critical vectors".into(),
        ));
    }
    if pattern.dim() != theta.dim() {
        return Err(Error::Dimension(format!("pattern dim {} != theta dim {}", pattern.dim(), theta.dim())));
    }
    model.check_theta(theta, data)?;
    let n_groups = model.n_groups(data);
    if n_groups == 0 {
        return Err(Error::Domain("dataset has no groups".into()));
    }
    let value = model.total_modified_score(theta, pattern, data)?;
    let info = model.modified_info(theta, pattern, data)?;
    Ok(ModifiedScore {
        value,
        info,
        n_groups,
        pattern: pattern.clone(),
    })
}

/// `s̃ᵀ Ĩ⁻¹ s̃` with `df = dim(θ)`.
pub fn modified_statistic<M: ScoreModel>(model: &M, theta: &ParameterPoint, data: &M::Data) -> Result<TestResult> {
    modified_statistic_with(model, theta, data, &StatOptions::default())
}

pub fn modified_statistic_with<M: ScoreModel>(
    model: &M,
    theta: &ParameterPoint,
    data: &M::Data,
    opts: &StatOptions,
) -> Result<TestResult> {
    let pattern = critical_pattern(theta, opts.zero_tol);
    statistic_from_score(&modified_score(model, theta, &pattern, data)?)
}

/// Statistic for an already assembled modified score.
pub fn statistic_from_score(ms: &ModifiedScore) -> Result<TestResult> {
    let factor = PdFactor::new(&ms.info, PIVOT_REL_TOL)?;
    let stat = factor.quad_form(&ms.value);
    TestResult::new(stat, ms.value.len(), &ms.pattern, linalg::condition_number(&ms.info))
}

fn complement(dim: usize, keep: &[usize]) -> Vec<usize> {
    (0..dim).filter(|i| !keep.contains(i)).collect()
}

fn check_index_set(dim: usize, keep: &[usize]) -> Result<()> {
    for (a, &i) in keep.iter().enumerate() {
        if i >= dim {
            return Err(Error::Dimension(format!("index {i} out of range {dim}")));
        }
        if keep[..a].contains(&i) {
            return Err(Error::Dimension(format!("index {i} repeated")));
        }
    }
    Ok(())
}

/// Efficient information `M_kk − M_kr M_rr⁻¹ M_rk` for the coordinates in
/// `keep` (in the given order).
pub fn schur_complement(m: &DMatrix<f64>, keep: &[usize]) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::Dimension("schur_complement needs a square matrix".into()));
    }
    check_index_set(d, keep)?;
    let rest = complement(d, keep);
    let m_kk = linalg::submatrix(m, keep, keep);
    if rest.is_empty() {
        return Ok(m_kk);
    }
    let m_rr = linalg::submatrix(m, &rest, &rest);
    let m_rk = linalg::submatrix(m, &rest, keep);
    let f = PdFactor::new(&m_rr, PIVOT_REL_TOL).map_err(|e| match e {
        Error::SingularInformation { index, pivot, threshold } => Error::SingularInformation {
            index: rest[index],
            pivot,
            threshold,
        },
        other => other,
    })?;
    let solved = f.solve_matrix(&m_rk);
    Ok(linalg::symmetrize(&(m_kk - m_rk.transpose() * solved)))
}

/// Statistic for the coordinates in `interest`, the remaining entries of
/// `theta` held at their supplied (known or estimated) values.
pub fn subvector_statistic<M: ScoreModel>(
    model: &M,
    theta: &ParameterPoint,
    data: &M::Data,
    interest: &[usize],
) -> Result<TestResult> {
    subvector_statistic_with(model, theta, data, interest, &StatOptions::default())
}

pub fn subvector_statistic_with<M: ScoreModel>(
    model: &M,
    theta: &ParameterPoint,
    data: &M::Data,
    interest: &[usize],
    opts: &StatOptions,
) -> Result<TestResult> {
    if interest.is_empty() {
        return Err(Error::Dimension("interest set must be nonempty".into()));
    }
    check_index_set(theta.dim(), interest)?;
    let pattern = critical_pattern(theta, opts.zero_tol);
    let ms = modified_score(model, theta, &pattern, data)?;
    subvector_from_score(&ms, interest, opts)
}

pub fn subvector_from_score(ms: &ModifiedScore, interest: &[usize], opts: &StatOptions) -> Result<TestResult> {
    let eff = schur_complement(&ms.info, interest)?;
    let factor = PdFactor::new(&eff, PIVOT_REL_TOL)?;
    let mut s = linalg::subvector(&ms.value, interest);
    let rest = complement(ms.info.nrows(), interest);
    if opts.project_nuisance && !rest.is_empty() {
        let f_rr = PdFactor::new(&linalg::submatrix(&ms.info, &rest, &rest), PIVOT_REL_TOL)?;
        let m_ir = linalg::submatrix(&ms.info, interest, &rest);
        s -= m_ir * f_rr.solve(&linalg::subvector(&ms.value, &rest));
    }
    let mut result = TestResult::new(
        factor.quad_form(&s),
        interest.len(),
        &ms.pattern,
        linalg::condition_number(&eff),
    )?;
    if !rest.is_empty() {
        let cross = linalg::submatrix(&ms.info, interest, &rest);
        let cross_norm = cross.svd(false, false).singular_values.max();
        let (min_eig, _) = linalg::eigen_range(&linalg::submatrix(&ms.info, interest, interest));
        if cross_norm > opts.nonorthogonal_fraction * min_eig {
            result.diagnostics.push(Diagnostic::NonOrthogonalNuisance {
                cross_norm,
                interest_min_eig: min_eig,
            });
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalDirection {
    pub eigenvalue: f64,
    pub vector: DVector<f64>,
}

/// Eigenpairs of `info` whose eigenvalue is at most `rel_threshold` times
/// the largest eigenvalue, in ascending order of eigenvalue.
pub fn detect_critical_numeric(info: &DMatrix<f64>, rel_threshold: f64) -> Vec<CriticalDirection> {
    if info.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(linalg::symmetrize(info));
    let max = eig.eigenvalues.max();
    let mut out: Vec<CriticalDirection> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= rel_threshold * max)
        .map(|(i, &v)| {
            let mut vec: DVector<f64> = eig.eigenvectors.column(i).into_owned();
            // sign convention: largest-magnitude component positive
            let imax = vec.iamax();
            if vec[imax] < 0.0 {
                vec = -vec;
            }
            CriticalDirection { eigenvalue: v, vector: vec }
        })
        .collect();
    out.sort_by(|a, b| a.eigenvalue.total_cmp(&b.eigenvalue));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn schur_by_hand() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let s = schur_complement(&m, &[0]).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn schur_of_block_diagonal_is_block() {
        let m = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 0.5, 0.0, 2.0, 0.0, 0.5, 0.0, 1.0]);
        let s = schur_complement(&m, &[1]).unwrap();
        assert_eq!(s[(0, 0)], 2.0);
        assert_eq!(schur_complement(&m, &[0, 1, 2]).unwrap(), m);
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, 0);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn schur_matches_inverse_of_inverse_block() {
        for seed in 0..20 {
            let m = random_spd(5, seed);
            let keep = [0, 2];
            let s = schur_complement(&m, &keep).unwrap();
            let inv = m.clone().try_inverse().unwrap();
            let oracle = linalg::submatrix(&inv, &keep, &keep).try_inverse().unwrap();
            assert!((s - oracle).amax() < 1e-9);
        }
    }

    #[test]
    fn nested_schur_equals_one_shot() {
        let m = random_spd(6, 99);
        // eliminate {4, 5} then {3}, versus {3, 4, 5} at once
        let step1 = schur_complement(&m, &[0, 1, 2, 3]).unwrap();
        let step2 = schur_complement(&step1, &[0, 1, 2]).unwrap();
        let once = schur_complement(&m, &[0, 1, 2]).unwrap();
        assert!((step2 - once).amax() < 1e-9);
    }

    #[test]
    fn schur_reports_singular_nuisance() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!(matches!(schur_complement(&m, &[0]), Err(Error::SingularInformation { .. })));
    }

    #[test]
    fn detection_examples() {
        assert!(detect_critical_numeric(&DMatrix::identity(3, 3), 1e-8).is_empty());
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 2.0]));
        let found = detect_critical_numeric(&d, 1e-8);
        assert_eq!(found.len(), 1);
        assert!((found[0].vector[0].abs() - 1.0).abs() < 1e-12);
        assert_eq!(found[0].eigenvalue, 0.0);
    }

    #[test]
    fn detected_vectors_are_orthonormal() {
        let v = random_spd(4, 7);
        // rank-2 matrix
        let eig = SymmetricEigen::new(v);
        let mut vals = eig.eigenvalues.clone();
        vals[0] = 0.0;
        vals[1] = 1e-14;
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        let found = detect_critical_numeric(&m, 1e-10);
        assert_eq!(found.len(), 2);
        let basis = DMatrix::from_columns(&found.iter().map(|c| c.vector.clone()).collect::<Vec<_>>());
        let gram = basis.transpose() * basis;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-10);
    }
}
