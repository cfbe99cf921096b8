//! Concrete model families.

pub mod expmix;
pub mod lmm;
pub mod toy;
