//! Monocular depth estimation through a reprogrammed language-model pipeline.
//!
//! A frozen patch transformer encodes the image, cross-modal reprogramming
//! attends from patch embeddings to a small set of learned text prototypes,
//! statistical prompts describe the image to the sequence encoder, and an
//! upsampling adaptation head projects the hidden states back to a dense
//! metric depth map. Training touches only the reprogramming layer, the
//! prompts' prototype map, the head, and optional LoRA adapters on the
//! frozen backbones.

pub mod adaptation_head;
pub mod apg;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod init;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod reprogramming;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
