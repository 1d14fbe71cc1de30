//! Reverse-mode autodiff tape.
//!
//! Ops executed while a recording tape is in scope append a backward closure.
//! `backward` drains the closures in reverse execution order, so every node is
//! visited exactly once. Intermediate gradients live in a per-backward store
//! indexed by node id; leaf gradients accumulate into the `GradCell` attached
//! to each `requires_grad` tensor.

use std::sync::{Arc, Mutex};

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Gradient slot shared between a leaf tensor and the tape closures that
/// consumed it. A `Mutex` keeps leaf tensors `Send + Sync`; backward itself is
/// single-threaded so the lock is uncontended.
pub struct GradCell<E: Element> {
    len: usize,
    slot: Mutex<Option<Vec<E>>>,
}

impl<E: Element> GradCell<E> {
    pub fn new(len: usize) -> Self {
        GradCell { len, slot: Mutex::new(None) }
    }

    pub fn accumulate(&self, contrib: &[E]) {
        assert_eq!(contrib.len(), self.len, "gradient length mismatch");
        let mut guard = self.slot.lock().unwrap();
        match guard.as_mut() {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += *c;
                }
            }
            None => *guard = Some(contrib.to_vec()),
        }
    }

    pub fn snapshot(&self) -> Option<Vec<E>> {
        self.slot.lock().unwrap().clone()
    }

    pub fn take(&self) -> Option<Vec<E>> {
        self.slot.lock().unwrap().take()
    }

    pub fn clear(&self) {
        *self.slot.lock().unwrap() = None;
    }
}

/// Where an input's gradient contribution goes.
pub(crate) enum Sink<E: Element> {
    Node(NodeId),
    Leaf(Arc<GradCell<E>>),
    Discard,
}

/// Gradient store threaded through the backward closures.
pub struct Flow<E: Element> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Flow<E> {
    /// Upstream gradient of a node, if any consumer produced one. Taking it
    /// frees the buffer: each node is the output of exactly one op and all of
    /// its consumers have already run.
    pub(crate) fn take(&mut self, id: NodeId) -> Option<Vec<E>> {
        self.grads[id].take()
    }

    pub(crate) fn add(&mut self, sink: &Sink<E>, contrib: Vec<E>) {
        match sink {
            Sink::Node(id) => match self.grads[*id].as_mut() {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                }
                None => self.grads[*id] = Some(contrib),
            },
            Sink::Leaf(cell) => cell.accumulate(&contrib),
            Sink::Discard => {}
        }
    }
}

type Record<E> = Box<dyn FnOnce(&mut Flow<E>) + Send>;

/// Ordered record of executed primitive ops.
pub struct Tape<E: Element> {
    records: Vec<Record<E>>,
    node_count: usize,
    recording: bool,
    consumed: bool,
}

impl<E: Element> Tape<E> {
    /// A recording tape; ops on tracked tensors append backward closures.
    pub fn new() -> Self {
        Tape { records: Vec::new(), node_count: 0, recording: true, consumed: false }
    }

    /// A non-recording tape for plain inference.
    pub fn inactive() -> Self {
        Tape { records: Vec::new(), node_count: 0, recording: false, consumed: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording && !self.consumed
    }

    pub fn num_ops(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn fresh_node(&mut self) -> NodeId {
        let id = self.node_count;
        self.node_count += 1;
        id
    }

    pub(crate) fn push(&mut self, record: Record<E>) {
        self.records.push(record);
    }

    /// Attach a fresh node to `out` and record its backward closure, but only
    /// when recording and at least one input is tracked.
    pub(crate) fn record_op<F>(&mut self, inputs: &[&Tensor<E>], out: &mut Tensor<E>, make: F)
    where
        F: FnOnce(NodeId) -> Record<E>,
    {
        if !self.is_recording() || !inputs.iter().any(|t| t.tracked()) {
            return;
        }
        let id = self.fresh_node();
        out.node = Some(id);
        let record = make(id);
        self.push(record);
    }

    /// Reverse sweep from a scalar loss produced on this tape. Populates the
    /// gradient slot of every `requires_grad` leaf that the loss depends on
    /// and marks the tape consumed.
    pub fn backward(&mut self, loss: &Tensor<E>) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward on a consumed tape".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(loss_id) = loss.node else {
            return Err(Error::Tape("loss was not produced on this tape".into()));
        };
        self.consumed = true;

        let mut flow = Flow { grads: vec![None; self.node_count] };
        flow.grads[loss_id] = Some(vec![E::ONE]);
        for record in self.records.drain(..).rev() {
            record(&mut flow);
        }
        Ok(())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = ops::mul(&mut tape, &x, &x).unwrap();
        let err = tape.backward(&y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = ops::mul(&mut tape, &x, &x).unwrap();
        let loss = ops::sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(err.to_string().contains("consumed"));
    }

    #[test]
    fn backward_on_untracked_loss_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let loss = Tensor::scalar(1.0f64);
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn leaf_grad_accumulates_across_consumers() {
        // loss = sum(x*x) + sum(x) => d/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad();
        let sq = ops::mul(&mut tape, &x, &x).unwrap();
        let a = ops::sum(&mut tape, &sq).unwrap();
        let b = ops::sum(&mut tape, &x).unwrap();
        let loss = ops::add(&mut tape, &a, &b).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn inactive_tape_records_nothing() {
        let mut tape = Tape::<f32>::inactive();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = ops::mul(&mut tape, &x, &x).unwrap();
        assert!(y.node.is_none());
        assert_eq!(tape.num_ops(), 0);
    }
}
