//! Localized image–text contrastive pre-training on synthetic paired data.

pub mod alignment;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
