//! Confidence regions and intervals by inverting a test statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::chisq_quantile;
use crate::error::{Error, Result};
use crate::inference::{modified_statistic_with, subvector_statistic_with, ScoreModel, StatOptions};
use crate::param::ParameterPoint;

/// Statistic values over a lattice of interest-parameter values.
///
/// Lattice points are stored row-major with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub axes: Vec<Vec<f64>>,
    pub df: usize,
    /// `None` where evaluation failed (for instance a singular information).
    pub statistic: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
    pub levels: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// `membership[l][p]`: point `p` is in the level-`l` region.
    pub membership: Vec<Vec<bool>>,
}

impl RegionGrid {
    pub fn len(&self) -> usize {
        self.statistic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statistic.is_empty()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    /// Coordinates of lattice point `index`.
    pub fn point(&self, index: usize) -> Vec<f64> {
        lattice_point(&self.axes, index)
    }
}

fn lattice_point(axes: &[Vec<f64>], mut index: usize) -> Vec<f64> {
    let mut out = vec![0.0; axes.len()];
    for (k, axis) in axes.iter().enumerate().rev() {
        out[k] = axis[index % axis.len()];
        index /= axis.len();
    }
    out
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::Domain(format!("confidence level must be in (0, 1), got {l}")));
    }
    Ok(())
}

fn check_axes(axes: &[Vec<f64>]) -> Result<()> {
    if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
        return Err(Error::Dimension("every grid axis needs at least one point".into()));
    }
    for a in axes {
        if a.windows(2).any(|w| !(w[0] < w[1])) || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid axes must be finite and strictly increasing".into()));
        }
    }
    Ok(())
}

/// Evaluate `stat` at every lattice point (in parallel) and threshold at the
/// `df`-degree chi-square quantiles of `levels`.
pub fn region_from_fn<F>(axes: Vec<Vec<f64>>, df: usize, levels: &[f64], stat: F) -> Result<RegionGrid>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    check_axes(&axes)?;
    check_levels(levels)?;
    let total: usize = axes.iter().map(|a| a.len()).product();
    let results: Vec<Result<f64>> = (0..total)
        .into_par_iter()
        .map(|i| stat(&lattice_point(&axes, i)))
        .collect();
    let thresholds = levels.iter().map(|&l| chisq_quantile(df, l)).collect::<Result<Vec<_>>>()?;
    let mut statistic = Vec::with_capacity(total);
    let mut errors = Vec::with_capacity(total);
    for r in results {
        match r {
            Ok(v) => {
                statistic.push(Some(v));
                errors.push(None);
            }
            Err(e) => {
                statistic.push(None);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let membership = thresholds
        .iter()
        .map(|&t| statistic.iter().map(|s| s.is_some_and(|v| v <= t)).collect())
        .collect();
    Ok(RegionGrid {
        axes,
        df,
        statistic,
        errors,
        levels: levels.to_vec(),
        thresholds,
        membership,
    })
}

/// Modified score statistic at `base` with the `interest` coordinates
/// replaced by `values`; the others stay at their supplied values.
pub fn statistic_at<M: ScoreModel>(
    model: &M,
    data: &M::Data,
    base: &ParameterPoint,
    interest: &[usize],
    values: &[f64],
    opts: &StatOptions,
) -> Result<f64> {
    let mut flat = base.to_flat();
    for (&i, &v) in interest.iter().zip(values) {
        flat[i] = v;
    }
    let theta = base.from_flat_like(&flat)?;
    let r = if interest.len() == theta.dim() {
        modified_statistic_with(model, &theta, data, opts)?
    } else {
        subvector_statistic_with(model, &theta, data, interest, opts)?
    };
    Ok(r.statistic)
}

/// Region for the `interest` coordinates with the nuisance coordinates
/// fixed at their values in `base`.
pub fn invert_region<M: ScoreModel>(
    model: &M,
    data: &M::Data,
    base: &ParameterPoint,
    interest: &[usize],
    axes: Vec<Vec<f64>>,
    levels: &[f64],
    opts: &StatOptions,
) -> Result<RegionGrid> {
    if interest.len() != axes.len() {
        return Err(Error::Dimension(format!(
            "{} interest coordinates but {} grid axes",
            interest.len(),
            axes.len()
        )));
    }
    if let Some(&i) = interest.iter().find(|&&i| i >= base.dim()) {
        return Err(Error::Dimension(format!("interest index {i} out of range")));
    }
    region_from_fn(axes, interest.len(), levels, |v| statistic_at(model, data, base, interest, v, opts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// The accepted scan points form more than one run.
    pub disconnected: bool,
    /// `lo` (resp. `hi`) is the end of the scan range rather than a crossing.
    pub lo_at_scan_bound: bool,
    pub hi_at_scan_bound: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ScanRange {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

/// Interval from a scalar statistic: coarse scan, then bisection of every
/// crossing of the `df = 1` quantile. No convexity is assumed; `disconnected`
/// reports an accepted set that is not an interval.
pub fn interval_from_fn<F>(stat: F, level: f64, scan: ScanRange, refine_tol: f64) -> Result<Interval>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    check_levels(&[level])?;
    if !(scan.lo < scan.hi) || scan.steps < 2 || !(refine_tol > 0.0) {
        return Err(Error::Domain("scan needs lo < hi, at least 2 steps and a positive tolerance".into()));
    }
    let crit = chisq_quantile(1, level)?;
    let accept = |x: f64| stat(x).map(|v| v <= crit).unwrap_or(false);
    let xs: Vec<f64> = (0..scan.steps)
        .map(|i| {
            if i + 1 == scan.steps {
                scan.hi
            } else {
                scan.lo + (scan.hi - scan.lo) * i as f64 / (scan.steps - 1) as f64
            }
        })
        .collect();
    let acc: Vec<bool> = xs.par_iter().map(|&x| accept(x)).collect();
    let first = acc.iter().position(|&a| a).ok_or(Error::EmptyRegion { level })?;
    let last = acc.iter().rposition(|&a| a).unwrap_or(first);
    let runs = acc.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(acc[0]);

    let bisect = |mut out: f64, mut inn: f64| -> f64 {
        while (out - inn).abs() > refine_tol {
            let mid = 0.5 * (out + inn);
            if accept(mid) {
                inn = mid;
            } else {
                out = mid;
            }
        }
        inn
    };
    let lo = if first == 0 { xs[0] } else { bisect(xs[first - 1], xs[first]) };
    let hi = if last + 1 == xs.len() {
        xs[last]
    } else {
        bisect(xs[last + 1], xs[last])
    };
    Ok(Interval {
        lo,
        hi,
        disconnected: runs > 1,
        lo_at_scan_bound: first == 0,
        hi_at_scan_bound: last + 1 == xs.len(),
    })
}

/// Interval for one coordinate of `base`, other coordinates held fixed and
/// profiled out through the efficient information.
pub fn componentwise_interval<M: ScoreModel>(
    model: &M,
    data: &M::Data,
    base: &ParameterPoint,
    index: usize,
    level: f64,
    scan: ScanRange,
    refine_tol: f64,
    opts: &StatOptions,
) -> Result<Interval> {
    if index >= base.dim() {
        return Err(Error::Dimension(format!("index {index} out of range")));
    }
    interval_from_fn(
        |x| statistic_at(model, data, base, &[index], &[x], opts),
        level,
        scan,
        refine_tol,
    )
}
