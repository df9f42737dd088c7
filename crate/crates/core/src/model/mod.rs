//! Pixel-space conditional diffusion transformer.
//!
//! Target patches attend to themselves and cross-attend to the patches of
//! four context frames. A conditioning vector built from the diffusion step,
//! relative time, cumulative action and output view modulates every block
//! through zero-initialized adaptive layer norm.

mod checkpoint;
mod config;
mod network;
mod params;
mod patch;
mod sampler;
mod schedule;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, TrainState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use network::{
    action_features, context_kv, denoise, embed_conditioning, encode_context, eps_loss, forward, pos_embed_2d, CondInput,
    ACTION_SCALE, REL_TIME_SCALE,
};
pub use params::{param_specs, Bound, Init, ModelParams};
pub use patch::{frame_to_patches, frame_to_unit, patches_to_frame, patchify_raw, unit_to_frame, unpatchify_raw};
pub use sampler::{context_tensor, frame_patches, Model, SampleRequest};
pub use schedule::NoiseSchedule;
