//! Frozen teachers, the tri-modal contrastive loss, and the trainer that
//! updates only the lens and any unlocked ViT components.

mod checkpoint;
mod loss;
mod optim;
mod probe;
mod teacher;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore, save_checkpoint, snapshot,
    state_hash, Checkpoint, VLCK_MAGIC, VLCK_VERSION,
};
pub use loss::{contrastive_loss, contrastive_loss_on_tape, ContrastiveBatch, LossBreakdown};
pub use optim::{
    adamw_update, AlignmentState, Moments, TrainerConfig, LOGIT_SCALE, LOGIT_SCALE_MAX,
    LOGIT_SCALE_MIN,
};
pub use probe::{jitter_trainable, pipeline_gradcheck, tiny_pipeline_config, PipelineGradReport};
pub use teacher::{
    hash_features, normalize_feature, teacher_embed, TeacherConfig, TeacherEmbedder, TeacherKind,
    Teachers,
};
pub use trainer::{
    batch_indices, prepare_triplets, train_loop, train_step, train_step_prepared, AnchorConfig,
    AnchorPools, CheckpointPlan, PreparedOwned, PreparedTriplet, StepRecord, TrainSample,
    TrainingSet, Triplet,
};
