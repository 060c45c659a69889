//! The frozen ViT that consumes lens latents, its unlock selectors, and the
//! composed shape encoder.

mod pipeline;
mod unlock;
mod vit;

pub use pipeline::{encode_shape, EncoderPipeline, PipelineConfig, PipelineVariant, HEAD_PROJ};
pub use unlock::{unlock_components, vit_trainable_count, UnlockSelector};
pub use vit::{
    init_vit, interpolate_pos_embed, pos_interpolation_matrix, vit_encode, ViTConfig, VIT_CLS,
    VIT_FINAL_NORM, VIT_POS, VIT_PREFIX, VIT_PROJ,
};
