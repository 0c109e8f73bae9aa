//! Attention-associated adversarial learning on a small, deterministic CPU
//! autodiff stack.
//!
//! The crate is split into a tensor/tape core ([`tensor`], [`tape`],
//! [`kernels`]), the spatial-attention association machinery
//! ([`attention`]), perturbation generators ([`attack`]), the training loop
//! ([`train`]) and file formats ([`data`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runtime;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, AttackMethod, KernelKind};
pub use attention::{AssociationParams, AttentionState, CouplingHistory};
pub use error::{Error, Result};
pub use model::{Classifier, Mode, SmallCnn, SmallCnnConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{aal_step, evaluate, MetricsRow, TrainConfig, Trainer};
pub use data::{Dataset, Split};
