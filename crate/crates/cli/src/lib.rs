//! Library surface of the command-line toolkit: run configuration, the
//! training loop, evaluation, fusion, profiling, and overlay rendering.

pub mod config;
pub mod ops;
pub mod render;

pub use config::{DataSource, RunConfig};
pub use ops::{
    evaluate, evaluate_scenes, fuse_checkpoint, infer, load_scenes, profile_net, profile_text,
    train, MetricsReport, TrainReport,
};
