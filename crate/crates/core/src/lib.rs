//! Parameter-efficient transfer of frozen 1D/2D transformers to point-cloud
//! classification.
//!
//! A small trainable tokenizer turns a cloud into tokens, each token picks up
//! the frozen positional embeddings of the source model at its virtual 1D or
//! 2D projections, and guided adapters inserted into the frozen blocks
//! aggregate tokens that share a projected segment or patch.

pub mod ablation;
pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod inspect;
pub mod io;
pub mod model;
pub mod optim;
pub mod params;
pub mod pointcloud;
pub mod projection;
pub mod scalar;
pub mod shapes;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type PointCloud32 = pointcloud::PointCloud<f32>;
pub type PointCloud64 = pointcloud::PointCloud<f64>;
