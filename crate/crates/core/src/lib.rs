//! Core library of the diffusion privacy laboratory: diffusion math, the
//! toy denoiser and its training loops, the two defenses (alternating
//! distillation and alternating dual-model inference), membership-inference
//! attacks, and the evaluation metrics.

pub mod attacks;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use attacks::{
    blackbox_distance_score, default_loss_t_list, denoising_loss_score, run_attack, secmi_score,
    AttackScores, Orientation,
};
pub use checkpoint::{load_checkpoint, load_checkpoint_verified, save_checkpoint};
pub use config::{
    ArchConfig, AttackConfig, Defense, ExperimentConfig, SamplingConfig, ScheduleConfig,
    TrainParams,
};
pub use dataset::{
    gen_dataset, split_disjoint, DatasetSpec, DatasetSplit, DuplicationSpec, Generator,
    LabeledSample,
};
pub use denoiser::{timestep_embedding, Arch, Denoiser};
pub use diffusion::{
    ancestral_from_eps, ancestral_step, compose_denoise, compose_reverse, ddim_denoise_step,
    ddim_reverse_step, diffuse, posterior_mean, predict_x0, NoisePredictor,
};
pub use error::{Error, Result};
pub use experiment::{
    default_secmi_sweep, deployed_role, run_configured_attack, run_experiment, sampling_plan,
};
pub use manifest::{AttackReport, FileRef, MetricsBlock, RunManifest, RunStatus};
pub use metrics::{
    auc, default_memorization_eps, energy_distance, median_nn_distance, memorization_detection,
    memorization_fraction, roc_report, tpr_at_fpr, RocReport,
};
pub use optim::{Adam, AdamConfig};
pub use report::{report, ReportTable};
pub use sampler::{dual_sample, single_sample, SamplerMode, SamplerPlan, StartParity, StepKind};
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
pub use training::{
    generalization_gap, train_ddpm, train_distillmd, DistillOutcome, GapEstimate, TrainConfig,
    TrainOutcome,
};
