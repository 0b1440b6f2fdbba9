//! Context-gated scale-adaptive detection head.
//!
//! Three decoupled attention branches (block, neighbor, deformable) are fused
//! per query by a learned gate. The crate also carries everything needed to
//! train and score the head on synthetic feature pyramids: bipartite matching,
//! focal/L1/GIoU losses, AdamW, NMS and COCO-style mAP.
//!
//! All arithmetic is `f64` with hand-written backward passes; see
//! [`tensor::grad_check`] for the finite-difference oracle used to verify them.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod head;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, CsdnError, Result};
