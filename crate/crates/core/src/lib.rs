//! Desk-scale panoptic segmentation building blocks.
//!
//! The crate covers the full pipeline in plain Rust, double precision, no
//! tensor library:
//!
//! 1. [`types`]: images, label maps, embedding maps, coordinate grids.
//! 2. [`loss`]: softmax cross-entropy and the discriminative instance
//!    embedding loss with hand-derived gradients.
//! 3. [`network`]: a small 3x3 convolutional network with manual backprop,
//!    Adadelta with polynomial learning-rate decay, and two-stage training
//!    (the second stage widens the input with coordinate channels).
//! 4. [`clustering`]: flat-kernel mean-shift with grid bin seeding, applied
//!    per thing class, plus a bandwidth grid search.
//! 5. [`fusion`]: semantic map + instance map -> panoptic segmentation.
//! 6. [`metrics`]: segment matching, panoptic quality (PQ/SQ/RQ), mean IoU.
//! 7. [`datagen`]: deterministic synthetic scenes and mirrored scenes.
//!
//! Everything is deterministic for a fixed seed, independent of the rayon
//! worker count: parallel reductions always fold in a fixed order.

pub mod clustering;
pub mod datagen;
mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    make_coordinate_grid, ClassDef, ClassKind, ClassTable, CoordinateGrid, EmbeddingMap,
    FeatureMap, GradientMap, Image, InstanceMap, LossHyperParams, SemanticMap, IGNORE_LABEL,
};
