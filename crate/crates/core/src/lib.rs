//! Grounded spatial instructions in a voxel blocks world.
//!
//! The library turns a tokenized instruction plus a voxelized scene into
//! three grounded outputs:
//!
//! * `d_a`  — a distribution over block ids naming the block to move,
//! * `d_op` — a distribution over a learned bank of operation basis vectors,
//! * a predicted target pose `(x, y, z, theta)` for the moved block.
//!
//! The pipeline: two bidirectional LSTM encoders that share only a token
//! embedding matrix produce `d_a` and `d_op`; `d_a` is splatted onto the
//! voxel grid as an attention map; the operation vector selected by `d_op`
//! is broadcast at every voxel weighted by attention; a small convolution
//! stack plus a coordinate-grid readout regresses the target pose.
//!
//! Everything is built on a self-contained reverse-mode autodiff tape
//! ([`tape::Tape`]) over flat row-major tensors ([`tensor::Tensor`]),
//! generic over `f32`/`f64` via [`real::Real`].

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod eval;
pub mod gradcheck;
pub mod lang;
pub mod model;
pub mod opbank;
pub mod plot;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod world;

pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
