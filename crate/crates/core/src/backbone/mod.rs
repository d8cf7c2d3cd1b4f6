//! Patch-token backbone: embeddings, gated conformer blocks and token-wise
//! prediction heads.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{hex, sha256_hex, Checkpoint, Stage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BackboneKind, ModelConfig};
pub use model::{
    block, conv_module, embed, forward, heads, init_params, mhsa, param_count, positional_table, ForwardOptions,
    ForwardTrace, HeadOut, Lblm, Params, TokenBatch,
};

#[cfg(test)]
mod tests;
