//! Static and dynamic average consensus over payload stacks.
//!
//! Payloads are flat real blocks (scalars, vectors, or matrices averaged
//! entrywise). All functions return fresh stacks so every node reads the
//! previous round's values; per-node reductions sum in ascending neighbor
//! order, which keeps rounds deterministic.

use crate::netgraph::Topology;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("stack has {0} payloads but the topology has {1} nodes")]
    StackLength(usize, usize),
    #[error("payload shapes disagree within a stack")]
    ShapeMismatch,
}

/// Element of a vector space that consensus can mix.
pub trait Payload: Clone {
    fn zeros_like(&self) -> Self;
    /// `self += a * other`.
    fn add_scaled(&mut self, a: f64, other: &Self);
    fn same_shape(&self, other: &Self) -> bool;
}

impl Payload for f64 {
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
    fn same_shape(&self, _other: &Self) -> bool {
        true
    }
}

impl Payload for DVector<f64> {
    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.axpy(a, other, 1.0);
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.len() == other.len()
    }
}

impl Payload for DMatrix<f64> {
    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn add_scaled(&mut self, a: f64, other: &Self) {
        for (s, o) in self.iter_mut().zip(other.iter()) {
            *s += a * o;
        }
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
}

fn check_stack<T: Payload>(topo: &Topology, stack: &[T]) -> Result<(), ConsensusError> {
    if stack.len() != topo.node_count() {
        return Err(ConsensusError::StackLength(stack.len(), topo.node_count()));
    }
    let first = &stack[0];
    if stack.iter().any(|p| !p.same_shape(first)) {
        return Err(ConsensusError::ShapeMismatch);
    }
    Ok(())
}

/// One round of static consensus: `out_i = sum_j w[i][j] stack_j`.
pub fn static_step<T: Payload>(topo: &Topology, stack: &[T]) -> Result<Vec<T>, ConsensusError> {
    check_stack(topo, stack)?;
    let n = topo.node_count();
    let w = topo.weights();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = stack[0].zeros_like();
        for j in 0..n {
            let wij = w[(i, j)];
            if wij != 0.0 {
                acc.add_scaled(wij, &stack[j]);
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Dynamic consensus, message form:
/// `s_i <- sum_j w[i][j] s_j + (v_new_i - v_old_i)`.
pub fn dynamic_step_message<T: Payload>(
    topo: &Topology,
    messages: &[T],
    v_new: &[T],
    v_old: &[T],
) -> Result<Vec<T>, ConsensusError> {
    check_stack(topo, messages)?;
    check_stack(topo, v_new)?;
    check_stack(topo, v_old)?;
    let mut out = static_step(topo, messages)?;
    for i in 0..out.len() {
        out[i].add_scaled(1.0, &v_new[i]);
        out[i].add_scaled(-1.0, &v_old[i]);
    }
    Ok(out)
}

/// Dynamic consensus, estimate form:
/// `u_i <- sum_j w[i][j] (u_j + v_new_j - v_old_j)`.
pub fn dynamic_step_estimate<T: Payload>(
    topo: &Topology,
    estimates: &[T],
    v_new: &[T],
    v_old: &[T],
) -> Result<Vec<T>, ConsensusError> {
    check_stack(topo, estimates)?;
    check_stack(topo, v_new)?;
    check_stack(topo, v_old)?;
    let mut inner = estimates.to_vec();
    for i in 0..inner.len() {
        inner[i].add_scaled(1.0, &v_new[i]);
        inner[i].add_scaled(-1.0, &v_old[i]);
    }
    static_step(topo, &inner)
}

/// Estimate-form tracker holding the per-node estimates and the inputs they
/// were last driven with.
#[derive(Debug, Clone)]
pub struct DynamicTracker<T: Payload> {
    pub estimates: Vec<T>,
    pub last_inputs: Vec<T>,
}

impl<T: Payload> DynamicTracker<T> {
    /// Initializes the tracker; by default the first estimates equal the
    /// first inputs, which makes the average of the estimates equal the
    /// average of the inputs at every round.
    pub fn new(initial_inputs: Vec<T>) -> Self {
        Self {
            estimates: initial_inputs.clone(),
            last_inputs: initial_inputs,
        }
    }

    /// Tracker with estimates decoupled from the first inputs.
    pub fn with_estimates(estimates: Vec<T>, initial_inputs: Vec<T>) -> Self {
        Self {
            estimates,
            last_inputs: initial_inputs,
        }
    }

    /// Advances one round with fresh inputs.
    pub fn step(&mut self, topo: &Topology, inputs: Vec<T>) -> Result<(), ConsensusError> {
        self.estimates = dynamic_step_estimate(topo, &self.estimates, &inputs, &self.last_inputs)?;
        self.last_inputs = inputs;
        Ok(())
    }
}
