//! Capsule networks whose coupling coefficients are trained by gradient
//! descent together with every other parameter, instead of being computed by
//! an iterative routing procedure.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tape`], [`tensor`], [`conv`]), capsule layers ([`capsule`]),
//! objectives ([`objectives`]), MNIST ingestion ([`mnist`]), models
//! ([`model`]), optimizers ([`optim`]), checkpoints ([`checkpoint`]) and
//! the training loop ([`train`]).

pub mod capsule;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod mnist;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
