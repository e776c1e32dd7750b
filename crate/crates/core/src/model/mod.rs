//! The tripartite network: earthquake encoder, soil encoder and fusion head.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_bytes, read_manifest, save_checkpoint, Manifest, ParamEntry,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use config::{ablation_configs, count_params, EqChannels, ModelConfig};
pub use network::{Batch, ForwardVars, Model, ModelInput, Prediction};
