//! Benchmark evaluation: annotation and result files, OPE metrics,
//! attribute rules and breakdowns, and dataset statistics.

pub mod annotation;
pub mod attributes;
pub mod benchmark;
pub mod metrics;
pub mod stats;

pub use annotation::{parse_sequence, SequenceAnnotation, TrackResult};
pub use attributes::{auto_attributes, Attribute, Attributes, AutoAttributes, LengthClass};
pub use benchmark::{evaluate_benchmark, BenchmarkReport};
pub use metrics::{evaluate_sequence, MetricReport, Summary};
pub use stats::{dataset_stats, DatasetStats};
