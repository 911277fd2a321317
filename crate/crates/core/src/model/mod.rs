//! The three-stream tangled transformer, its parameters and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use forward::{
    encode_batch, forward, forward_vars, heads, heads_vars, match_logits_var, match_scores, multihead_attention,
    partition_vars, tangled_block, tangled_block_vars, BatchLayout, Coupling, ForwardVars, HeadOutputs, HeadVars,
    KeyCounts, StreamStates, StreamVars,
};
pub use params::{AttentionWeights, CrossAttention, KvGenerator, ModelParams, StreamLayer, TangledLayer, TaskHeads};
