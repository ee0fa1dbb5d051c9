//! Experiment harness behind the `cea-kit` binary: run configuration,
//! optimizer, training/evaluation loops, property suites, benchmarks,
//! ablation grids, and bootstrap analysis.

pub mod ablate;
pub mod bench;
pub mod boot;
pub mod config;
pub mod eval;
pub mod optim;
pub mod props;
pub mod train;

pub use ablate::{cmd_ablate, AblationAxis, AblationReport};
pub use bench::{cmd_bench, BenchReport};
pub use boot::{cmd_bootstrap, BootstrapReport};
pub use config::RunConfig;
pub use eval::{cmd_eval, evaluate_split, EvalSummary};
pub use props::{cmd_props, PropsReport};
pub use train::{cmd_train, RunArtifacts};
