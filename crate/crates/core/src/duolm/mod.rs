//! Dual-head decoder: a shared causal transformer backbone feeding a text
//! post-LM and an audio post-LM that both emit a token every step. The
//! audio stream runs `D` steps behind the text stream, and the next input is
//! the average of the two predicted tokens' embeddings.

pub mod lora;
mod model;
mod sequence;
pub mod train;

pub use model::{
    Decoding, DuoLm, DuoLmConfig, FuseMode, Generation, Logits, Stage, AUDIO_POLICY_PREFIXES,
    BASE_PREFIXES,
};
pub use sequence::{build_joint_sequence, JointSequence};
