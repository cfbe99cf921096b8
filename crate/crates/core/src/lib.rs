//! Modified score statistics with a continuous extension at points where the
//! Fisher information is singular, and the confidence regions obtained by
//! inverting them.
//!
//! The generic machinery lives in [`inference`] and works with any
//! [`ScoreModel`]. Three model families are provided: a closed-form
//! random-intercept model ([`models::toy`]), an exponential mixed model with a
//! uniform random effect ([`models::expmix`]) and the general linear mixed
//! model ([`models::lmm`]).

pub mod chisq;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod param;
pub mod quadrature;
pub mod region;
pub mod rng;
pub mod sim;

pub use chisq::{chisq_cdf, chisq_quantile, chisq_sf};
pub use error::{Error, Result};
pub use inference::{
    detect_critical_numeric, modified_score, modified_statistic, modified_statistic_with, schur_complement,
    subvector_statistic, subvector_statistic_with, CriticalDirection, Diagnostic, ModifiedScore, ScoreModel,
    StatOptions, TestResult,
};
pub use param::{critical_pattern, Block, CriticalPattern, ParameterPoint};
pub use region::{componentwise_interval, invert_region, Interval, RegionGrid, ScanRange};
pub use io::{parse_long_csv, write_long_csv, Formula, GroupedDataset};
pub use sim::{gen_sim_data, run_coverage, run_power, run_qq, SimConfig, SimResult, StatKind};
