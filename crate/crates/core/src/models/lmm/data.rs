use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sufficient cross-products of one group. Every likelihood quantity the
/// model needs is a function of these and the `q × q` matrix
/// `K = σ²I + ΛZᵀZΛ`, so evaluation cost does not grow with group size.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GroupSummary {
    pub ztz: DMatrix<f64>,
    pub ztx: DMatrix<f64>,
    pub zty: DVector<f64>,
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmGroup {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    pub(crate) summary: GroupSummary,
}

impl LmmGroup {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let r = y.len();
        if r == 0 {
            return Err(Error::Dimension("group has no observations".into()));
        }
        if x.nrows() != r || z.nrows() != r {
            return Err(Error::Dimension(format!(
                "group with {r} responses has X with {} rows and Z with {} rows",
                x.nrows(),
                z.nrows()
            )));
        }
        if y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("group data must be finite".into()));
        }
        let summary = GroupSummary {
            ztz: z.tr_mul(&z),
            ztx: z.tr_mul(&x),
            zty: z.tr_mul(&y),
            xtx: x.tr_mul(&x),
            xty: x.tr_mul(&y),
            yty: y.norm_squared(),
        };
        Ok(Self { y, x, z, summary })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Same design, new responses.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.x.clone(), self.z.clone())
    }
}

/// Grouped data with per-group designs and the map from random-effect
/// columns to scale parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmData {
    groups: Vec<LmmGroup>,
    scale_map: Vec<usize>,
    n_scales: usize,
}

impl LmmData {
    /// `scale_map[k]` is the scale parameter of random-effect column `k`;
    /// every scale index below `max + 1` must be used.
    pub fn new(groups: Vec<LmmGroup>, scale_map: Vec<usize>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Dimension("dataset has no groups".into()));
        }
        let q = scale_map.len();
        if q == 0 {
            return Err(Error::Dimension("at least one random-effect column is required".into()));
        }
        let p = groups[0].x.ncols();
        for (i, g) in groups.iter().enumerate() {
            if g.x.ncols() != p || g.z.ncols() != q {
                return Err(Error::Dimension(format!(
                    "group {i} has {} fixed and {} random columns, expected {p} and {q}",
                    g.x.ncols(),
                    g.z.ncols()
                )));
            }
        }
        let n_scales = scale_map.iter().max().map_or(0, |m| m + 1);
        for j in 0..n_scales {
            if !scale_map.contains(&j) {
                return Err(Error::Dimension(format!("scale parameter {j} has no random-effect column")));
            }
        }
        Ok(Self {
            groups,
            scale_map,
            n_scales,
        })
    }

    pub fn groups(&self) -> &[LmmGroup] {
        &self.groups
    }

    pub fn scale_map(&self) -> &[usize] {
        &self.scale_map
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// `d₁`
    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    /// `d₂`
    pub fn n_fixed(&self) -> usize {
        self.groups[0].x.ncols()
    }

    /// `q`
    pub fn n_random(&self) -> usize {
        self.scale_map.len()
    }

    pub fn n_obs(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Per-column scales `λ_(k)`.
    pub fn column_scales(&self, lambda: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.scale_map.len(), self.scale_map.iter().map(|&j| lambda[j]))
    }

    pub(crate) fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.n_scales {
            return Err(Error::Dimension(format!(
                "expected {} scale parameters, got {}",
                self.n_scales,
                lambda.len()
            )));
        }
        if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::Domain(format!("scale parameters must be finite and >= 0, got {l}")));
        }
        Ok(())
    }

    pub(crate) fn check_psi(&self, psi: &[f64]) -> Result<()> {
        if psi.len() != self.n_fixed() {
            return Err(Error::Dimension(format!(
                "expected {} fixed-effect parameters, got {}",
                self.n_fixed(),
                psi.len()
            )));
        }
        if psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("fixed-effect parameters must be finite".into()));
        }
        Ok(())
    }

    /// Same designs and scale map, new responses.
    pub fn with_responses(&self, ys: Vec<DVector<f64>>) -> Result<Self> {
        if ys.len() != self.groups.len() {
            return Err(Error::Dimension("one response vector per group is required".into()));
        }
        let groups = self
            .groups
            .iter()
            .zip(ys)
            .map(|(g, y)| g.with_response(y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            scale_map: self.scale_map.clone(),
            n_scales: self.n_scales,
        })
    }

    /// Subset of groups in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let groups = idx
            .iter()
            .map(|&i| {
                self.groups
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Dimension(format!("group index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups, self.scale_map.clone())
    }
}
