//! Context-based labeling of occluded segment blocks.
//!
//! Segmented images are condensed into block label matrices ([`Blm`]), a
//! gated PixelCNN learns their joint class distribution in raster order, and
//! an ensemble of four such models trained on the four quarter-turn
//! rotations of the data fills occluded regions using context from every
//! side.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! working precision to `f64`.

pub mod blm;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod quadro;
pub mod scalar;
pub mod train;

pub use blm::{extract_blm, format_blm, parse_blm, read_blm, rotate_coord, write_blm, Blm, Cell, ClassId, MaskRegion, Rotation, SegmentMap};
pub use error::{Error, Result};
pub use model::{encode_input, BlockDistribution, GatedLayer, Infill, ModelConfig, ModelParams};
pub use checkpoint::{load_any_checkpoint, load_checkpoint, load_quadro_checkpoint, save_checkpoint, save_quadro_checkpoint, Checkpoint, TrainMeta};
pub use quadro::{combine_distributions, train_quadro, CombineRule, EnsembleInfill, ProbabilityMap, QuadroParams};
pub use scalar::Scalar;
pub use train::{train, train_with_progress, Occlusion, Optimizer, TrainConfig, TrainOutcome};

pub type Model = ModelParams<f64>;
pub type Distribution = BlockDistribution<f64>;
pub type NumArray = nn::Tensor<f64>;
pub type Quadro = QuadroParams<f64>;
