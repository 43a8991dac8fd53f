//! Two-stage training and end-to-end inference.

mod config;
mod data;
mod infer;
mod losses;
mod model;
mod train;

pub use config::{DataConfig, FlowConfig, LossConfig, ModelConfig, StageConfig, TrainConfig, DESK_MAX_SCALE, PROFILES};
pub use data::{bicubic_baseline, sample_batch_scale, Dataset, TrainBatch};
pub use infer::{InferOutput, TrainedModel};
pub use losses::{
    adversarial_terms, discriminator_adversarial, generator_adversarial, l1_loss, perceptual_proxy, PROXY_SCALES,
};
pub use model::{
    latent_scale, Checkpoint, FlowGsNets, PatchDiscriminator, DISCRIMINATOR_PREFIX, FLOW_PREFIXES, GENERATOR_PREFIXES,
    LATENT_SCALE_PARAM,
};
pub use train::{
    is_generator_param, stage1_terms, train_stage1, train_stage2, validation_loss, Stage1Bindings, Stage1Report,
    Stage1Terms, Stage1Trainer, Stage2Report,
    Stage2Trainer, StageSummary, TrainLog, VALIDATION_SCALES,
};
