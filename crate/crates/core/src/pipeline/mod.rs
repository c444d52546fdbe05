//! End-to-end recipe plumbing: run configs, synthetic task generation,
//! stage training loops, transfer, and evaluation.

pub mod config;
pub mod data;
pub mod train;

pub use config::{
    ModelConfig, OptimizerConfig, Stage, TapConfig, TrainingConfig, TransferConfig, UnitsConfig,
};
pub use data::{
    generate_task, load_split, read_features, read_transcripts, stack_frames, write_features,
    write_features_csv, write_transcripts, Dataset, SyntheticTask, Utterance,
};
pub use train::{
    apply_transfers, build_ctc_model, build_lm_model, build_rnnt_model, evaluate, run_stage,
    run_stage_to_dir, train_ctc_model, train_lm_model, train_rnnt_model, CtcEncoderModel,
    EvalReport, StageResult, UnitResolver, UttResult,
};
