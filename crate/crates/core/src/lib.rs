//! Self-supervised video pretraining with slot-token transformers, at desk
//! scale: a dense-tensor autodiff engine, transformer building blocks, the
//! slot-token encoder / temporal transformer / masked-reconstruction model,
//! supervised pretraining baselines, procedurally generated reasoning worlds
//! with exact label oracles, attention-rollout analysis, and a training
//! harness behind a single CLI.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;
