//! Differentiable-computation substrate: the recording graph, parameters,
//! gradient verification, optimization and seeded randomness.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod lorentz;
pub mod optim;
pub mod params;
pub mod rng;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, NodeId, ScoreKind, Unary};
pub use optim::{adamw_step, CosineSchedule, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::RandomSource;

use crate::error::Result;

/// Reverse pass from `loss`: every gradient slot in `store` is overwritten,
/// with zeros for parameters the loss does not depend on.
pub fn backward(graph: &Graph, loss: NodeId, store: &mut ParamStore) -> Result<()> {
    let grads = graph.gradients(loss)?;
    store.set_grads(&grads);
    Ok(())
}
