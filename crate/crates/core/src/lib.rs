//! Component-wise feature aggregation for template-based matching.
//!
//! A template is a set of instances, each carrying an embedding and a feature
//! map. A learned quality head scores every embedding component of every
//! instance; the scores are normalized across the set per component and used
//! as pooling weights.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod math;
pub mod synthetic;
pub mod training;

pub use aggregation::{aggregate_template, AggregatedRep, FeatureInstance, PoolingMode, QualityHead, Template};
pub use error::{Error, Result};
