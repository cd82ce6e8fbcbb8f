//! Backbone, template-matching and FC heads, accounting and checkpoints.

mod checkpoint;
mod network;
mod schema;
mod stats;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use network::{
    Backbone, ConvStage, DtmHead, DtmModel, DtmOutput, FcBaseline, ForwardOutput, Head, HeadMode,
    ModelConfig, Pooling, TemplateBank, IMAGE_CHANNELS,
};
pub use schema::{Attribute, AttributeSchema};
pub use stats::{Layer, ModelStats};
