//! Decoder-only transformer: configuration, weights, forward and backward.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod generate;
mod vocab;

pub use backward::Gradients;
pub use checkpoint::{
    load_checkpoint, tensor_layout, BlockParams, Checkpoint, Manifest, Params, TensorEntry, MANIFEST_VERSION,
};
pub use config::ModelConfig;
pub use forward::{Gates, KvCache, RunOutput};
pub use generate::argmax;
pub use vocab::{Encoding, TokenId, TokenSpan, Vocab, BYTE_FALLBACK};

pub(crate) use forward::RunRequest;
