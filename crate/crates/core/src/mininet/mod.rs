//! MiniNet: a small staged CNN with group-taggable parameters, and its
//! portable checkpoint format.

mod checkpoint;
mod config;
mod layout;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use layout::{parse_param_name, tensor_layout, ParamKind, ParamMeta, TensorRole, TensorSlot, FC_BIAS, FC_WEIGHT};
pub use net::{ForwardCache, Model};
