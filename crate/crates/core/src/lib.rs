//! A small CPU inference engine for a toy multimodal decoder, used to
//! study two ways of cutting the cost of image tokens: pyramid token
//! merging during prefill and attention-coverage compression of the KV
//! cache before decoding.

pub mod attention;
pub mod error;
pub mod kvcache;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod oracle;

pub use attention::{multi_head_attention, AttentionMode, AttentionOutput, AttentionWeights};
pub use error::{Error, Result};
pub use kvcache::{compress_all, compress_layer, memory_estimate, CompressionConfig, KVCache};
pub use merge::{merge_tokens, partition_tokens, plan_keep_counts, pyramid_merge_layer, MergeSchedule, Segment, TokenSequence};
pub use model::{
    build_input, decode_step, generate, init_model, prefill, prefill_traced, Model, ModelConfig, PipelineConfig,
    RunMetrics,
};
pub use numerics::Matrix;
