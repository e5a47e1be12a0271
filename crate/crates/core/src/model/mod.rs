//! Encoders, classifier heads, gradient reversal and their exact backward
//! passes.

pub mod checkpoint;
pub mod encoder;
pub mod grl;
pub mod head;
pub mod layers;
pub mod params;

pub use checkpoint::Checkpoint;
pub use encoder::{Encoder, EncoderArch, EncoderTrace, InputShape, LayerSpec};
pub use grl::{grl_apply, GrlMode};
pub use head::{Activation, Head, HeadKind, HeadSpec, HeadTrace, NUM_DOMAINS};
pub use layers::Linear;
pub use params::{BlockId, Gradients, ModelConfig, ModelParams};
