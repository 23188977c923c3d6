//! The iteration operator: learned flow revisions mapped to pose updates by a
//! differentiable weighted Gauss-Newton layer.

pub mod ba;
pub mod diff;
mod iterate;
mod model;
mod operator;

pub use ba::{amba_step, assemble, jacobians, residual, solve, target_points, Damping, EdgeProblem, NormalEquations, StepReport};
pub use diff::{diff_amba_steps, diff_pose_loss, pose_tensor, tensor_pose, DiffEdge};
pub use iterate::{
    diagnostics_json_lines, edge_update, iterate, unroll, EdgeState, EdgeUpdate, IterConfig, IterationReport,
    UnrollConfig, UnrollProblem, UnrollResult, Volumes,
};
pub use model::{FrameInputs, Model, ModelConfig};
pub use operator::{Operator, OperatorConfig};
