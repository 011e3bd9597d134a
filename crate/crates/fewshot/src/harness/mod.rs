//! Config-driven experiment runner: reproducible training runs,
//! episodic evaluation, the component ablation grid, the backbone
//! sweep, and report emission.

pub mod checkpoint;
pub mod config;
pub mod experiment;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint};
pub use config::{
    projector_from_flags, resolve_out_dir, smoke_config, AblationGrid, DatasetRef, EvalTarget,
    ExperimentConfig, RUN_ROOT_ENV,
};
pub use experiment::{
    dataset_feature_sample, emit_plot_data, load_report_checked, read_plot_data, resolve_dataset,
    run_ablation, run_backbone_sweep, run_experiment, AblationRow, RunOutput, SweepRow, SCALE_NOTE,
};
