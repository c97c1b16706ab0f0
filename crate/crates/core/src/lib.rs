//! Phrase and object token decoding for panoptic narrative grounding on
//! small synthetic scenes.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: tensors, a reverse-mode tape, finite-difference checks, AdamW.
//! * [`scene`]: synthetic panoptic scenes with phrase annotations, stand-in
//!   encoders and the multi-scale pixel decoder.
//! * [`decoder`]: the phrase/object-token transformer decoder with masked
//!   cross-attention.
//! * [`matching`]: Hungarian matching, mask-classification losses and the
//!   phrase-object contrastive loss.
//! * [`metrics`]: IoU, plural aggregation, recall curves and Average Recall.
//! * [`model`]: the assembled grounding model and its training objective.
//! * [`run`]: configuration, checkpoints, training, evaluation and the
//!   verification harnesses behind the `ppotd` binary.

pub mod decoder;
pub mod error;
pub mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod run;
pub mod scene;

pub use error::{Error, Result};
