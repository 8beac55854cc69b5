//! Normalization, objective, optimizer, curriculum and synthetic data.

mod curriculum;
mod norm;
mod optim;
mod synth;

pub use curriculum::{
    fit_normalization, train_curriculum, weighted_l1_value, window_loss, write_trace, Prepared, TraceRow, TrainOptions,
};
pub use norm::NormStats;
pub use optim::{
    cosine_lr, full_scale_phases, parse_phases, warmup_cosine_lr, AdamW, CurriculumPhase, LrPolicy, OptimizerConfig,
};
pub use synth::{synth_dataset, Dataset, SynthGenerator, FAMILIES, NOISE};
