//! Training stages, recipes, and sweeps.

pub mod checkpoint;
pub mod data;
pub mod recipe;
pub mod stages;
pub mod sweep;
pub mod train;

pub use checkpoint::{config_hash, Checkpoint, Provenance, RngState};
pub use data::DataBundle;
pub use recipe::{build_base_lm, ensure_base_lm, recipe_methods, run_hash, run_recipe, RecipeOutput, RecipeSummary};
pub use stages::{
    assemble_model, instruct_tune, pretrain_mm, train_adapters, train_base_lm, train_proxy, LlmSource, StageConfig,
    StageOutput, StageTag, Trainable,
};
pub use sweep::{sweep, AxisValue, SweepAxis, SweepReport, SweepRow};
pub use train::{thread_count, train, LoopSettings, RunRecord, StepRecord, THREADS_ENV};
