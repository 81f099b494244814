//! Minimal reverse-mode autodiff with the layers, losses and optimizer
//! used by the two convolutional stages.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, op_suite, GradCheckConfig, GradCheckReport, OpCheck};
pub use graph::{sigmoid, Grads, Graph, Var, PROB_CLAMP};
pub use optim::{adam_step, AdamState, OptimizerConfig};
pub use params::{ConvBlock, Dense, ParamSet, Pointwise};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Focal { gamma: f64 },
    Dice { smooth: f64 },
}

impl LossKind {
    pub fn apply(&self, g: &mut Graph, p: Var, y: &Tensor) -> crate::Result<Var> {
        match *self {
            LossKind::Bce => g.bce_loss(p, y),
            LossKind::Focal { gamma } => g.focal_loss(p, y, gamma),
            LossKind::Dice { smooth } => g.dice_loss(p, y, smooth),
        }
    }
}
