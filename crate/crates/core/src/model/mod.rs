//! Toy diffusion transformer with joint text–image attention.

pub(crate) mod attention;
mod checkpoint;
mod config;
mod dit;
pub mod layers;
mod sampler;
mod schedule;
mod tokenizer;

pub use attention::joint_attention;
pub use config::ModelConfig;
pub use dit::{
    image_to_latent, signed_to_image, AttentionGradient, AttentionRecord, Backbone, Block,
    Conditioning, DiffusionTransformer, ForwardOutput, Gradients, SeqLayout, StreamWeights, Tape,
    TokenSequence,
};
pub use schedule::DiffusionSchedule;
pub use tokenizer::{tokenize_prompt, word_id, TokenizedPrompt, UNK_ID, VOCAB};
pub use checkpoint::{
    decode_checkpoint, decode_raw, encode_checkpoint, load_checkpoint, manifest_path,
    param_hashes, save_checkpoint, tensor_hash, tensor_manifest, AdapterMeta, CheckpointHeader,
    RawTensor,
};
pub use sampler::{ddim_timesteps, sample_edit, sample_edit_with, seeded_noise};
