//! Minimal transformer stack with an explicit gradient contract: tensors,
//! reverse-mode autodiff, the backbone, AdamW with warm-up, and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointGroup};
pub use model::{
    backbone_forward, build_backbone, multi_head_attention, BackboneIds, ModelConfig, Parameters,
    TokenModel,
};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Scalar, Tensor};
