//! Rank prediction for elliptic curves over Q from normalized Frobenius traces.
//!
//! The crate covers the whole pipeline: prime tables and trace computation,
//! data ingestion and caching, a small 1D convolutional network written from
//! scratch with exact gradients, seeded training runs, and the interpretation
//! tools (saliency curves, Mestre–Nagao sums, murmuration averages).

pub mod curve;
pub mod dataset;
pub mod error;
pub mod interpret;
pub mod nn;
pub mod numtheory;
pub mod report;
pub mod training;

pub use curve::{CurveRecord, ReductionType, TraceEngine, TraceVector};
pub use dataset::{DatasetSlice, FeatureMatrix, Interval, SplitSpec, SyntheticBatch};
pub use error::{Error, Result};
pub use nn::{ArchConfig, CnnModel, Mode};
pub use numtheory::{primes_up_to, PrimeTable};
pub use training::{Evaluation, RunManifest, TrainConfig};
