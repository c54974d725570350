//! Training data containers shared by the loss functions and the trainers.

use omni_autodiff::Tensor;

use crate::tasks::navigation::Trajectory;

/// Labels or regression targets attached to a batch of inputs.
#[derive(Debug, Clone)]
pub enum Targets {
    /// Class indices aligned with the input rows.
    Classes(Vec<usize>),
    /// A `[batch, out_dim]` matrix of real targets.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A mini-batch sampled from the full training distribution.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    /// `[batch, input_dim]`
    pub x: Tensor,
    pub y: Targets,
}

/// One task: a small labeled support set and a query set from the same task.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Targets,
    pub query_x: Tensor,
    pub query_y: Targets,
    /// Number of classes for classification episodes (0 otherwise).
    pub n_way: usize,
}

/// A set of trajectories from one task, flattened for loss computation.
#[derive(Debug, Clone, Default)]
pub struct TrajBatch {
    pub trajectories: Vec<Trajectory>,
}

impl TrajBatch {
    pub fn new(trajectories: Vec<Trajectory>) -> TrajBatch {
        TrajBatch { trajectories }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Flatten into `[T, 2]` states, `[T, 2]` actions and `[T, 1]` advantages
    /// (all constants; the surrogate recomputes log-probs on the graph).
    pub fn to_matrices(&self) -> (Tensor, Tensor, Tensor) {
        let total = self.total_steps();
        let mut states = Vec::with_capacity(total * 2);
        let mut actions = Vec::with_capacity(total * 2);
        let mut adv = Vec::with_capacity(total);
        for t in &self.trajectories {
            for i in 0..t.len() {
                states.extend_from_slice(&t.states[i]);
                actions.extend_from_slice(&t.actions[i]);
                adv.push(t.advantages[i]);
            }
        }
        (
            Tensor::constant(states, vec![total, 2]).expect("consistent trajectory data"),
            Tensor::constant(actions, vec![total, 2]).expect("consistent trajectory data"),
            Tensor::constant(adv, vec![total, 1]).expect("consistent trajectory data"),
        )
    }

    /// Mean undiscounted return across trajectories.
    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .trajectories
            .iter()
            .map(|t| t.rewards.iter().sum::<f64>())
            .sum();
        sum / self.trajectories.len() as f64
    }
}
