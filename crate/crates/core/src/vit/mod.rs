//! Vision-transformer regressor: configuration, parameters, preprocessing,
//! the graph-backed forward pass (with per-head ablation), and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;
pub mod preprocess;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NormStats};
pub use config::{BlockStyle, FfnActivation, ViTConfig};
pub use model::{
    ablate_weights, block_forward, build_forward, forward_batch, forward_image,
    lora_apply, mha_forward, model_grad_check, model_loss_and_grads, model_loss_eval,
    patch_embed, regression_head, AblationMask, AttentionTensor, ForwardBuilt,
};
pub use params::{LayerParams, LoraPair, ViTParams};
pub use preprocess::{patches_from_image, preprocess};
