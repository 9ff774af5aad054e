//! Tensor algebra, reverse-mode differentiation, optimizer and schedule.

mod graph;
mod optim;
mod schedule;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, AdamW, AdamWConfig, Moments};
pub use schedule::{cosine_lr, Schedule};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
