//! Gradient-perturbation training lab.
//!
//! A from-scratch multilayer perceptron trained with SGD, where the gradient
//! can be perturbed by clipping, Gaussian noise, SAM, or by rewriting the
//! per-sample logit gradients class by class (LPG, closed form or PGD).
//! Synthetic balanced, long-tailed and noisy-label data, a trainer with
//! per-class diagnostics and a set of numerical checks come with it.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod math;
pub mod net;
pub mod perturb;
pub mod schedule;
pub mod trainer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use math::{Matrix, Rng};
pub use net::{ForwardCache, Jacobian, Mlp, ParamGrad, Sample};
pub use perturb::{ClosedFormScope, PerturbMethod, PgdStep};
pub use schedule::{ClassStats, Direction, PerturbationPlan, PlanConfig, SplitMode, Threshold};
pub use trainer::{train, TrainConfig};
