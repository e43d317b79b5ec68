//! Toy preference-optimization harness.

pub mod data;
pub mod loss;
pub mod policy;
pub mod train;

pub use data::{gen_task_suite, SuiteConfig, TaskSuite};
pub use loss::{dpo_loss, dpo_loss_and_grad, Example, PreferencePair};
pub use policy::{PolicyShape, ToyPolicy};
pub use train::{
    prepare_models, train_run, DpoConfig, PhaseConfig, RunAborted, RunMetrics, RunOutput,
    RunRecord, TrainSpec,
};
