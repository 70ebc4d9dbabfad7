//! Training loop, checkpoints, configuration and the experiment drivers behind the CLI.

mod checkpoint;
mod config;
mod experiments;
mod run;
mod train;

pub use checkpoint::{Checkpoint, Dtype};
pub use config::{Arch, Scale, TrainConfig, TransformSet, KEYS};
pub use experiments::{
    end_to_end_gradcheck, eval_csv, evaluate, predictor, robustness, robustness_csv, sensitivity, sensitivity_csv,
    RobustnessRow, EVAL_HEADER, ROBUSTNESS_HEADER, SENSITIVITY_HEADER,
};
pub use run::{
    build_model, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_pretrain, cmd_robustness, cmd_sensitivity, cmd_train,
    load_experiment, load_model, SynthKind, TrainReport, CHECKPOINT_NAME, DIAGNOSTIC_NAME, EXTRACTOR_NAME, LOG_NAME,
    METRICS_NAME,
};
pub use train::{
    background_baseline, extractor_params, pretext_eval, pretrain_loop, train_loop, validate, LossSums, MetricsRow,
    StopReason, TrainState, TrainSummary, METRICS_HEADER,
};
