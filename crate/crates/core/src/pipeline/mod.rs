//! Manifest-driven batch pipeline behind the `fgcm` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod synth;

pub use commands::{cmd_eval, cmd_extract, cmd_report, cmd_train, RunDir, RunReport, SubsetMetrics, TrainReport};
pub use config::PipelineConfig;
pub use manifest::{parse_manifest, parse_manifests, Manifest, ManifestRow, Subset};
pub use synth::{synth_clip, write_corpus};
