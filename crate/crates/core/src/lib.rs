//! Tokenizer, data pipeline, causal transformer, training, decoding, metrics,
//! rewards and PPO fine-tuning for vulnerability identification and repair in C.

pub mod linalg;
pub mod corpus;
pub mod tokenizer;
pub mod dataset;
pub mod model;
pub mod trainer;
pub mod decode;
pub mod metrics;
pub mod reward;
pub mod ppo;
pub mod checkpoint;
