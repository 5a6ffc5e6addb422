//! Reverse pass over the implicit tape.

use std::collections::HashMap;

use super::{axpy, Real, Tensor, TensorError};

impl<F: Real> Tensor<F> {
    /// Run reverse-mode differentiation from this scalar. Gradients of every
    /// trainable leaf reachable from it are *accumulated* into their slots
    /// (call [`Tensor::zero_grad`] between steps).
    ///
    /// Visiting nodes in decreasing creation id is a valid reverse
    /// topological order because every op's inputs are created before its
    /// output.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::BackwardNonScalar {
                shape: self.shape().to_vec(),
            });
        }
        if !self.needs_grad() {
            return Err(TensorError::BackwardDetached);
        }

        // Upstream gradients, keyed by node id, pending consumption.
        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::one()]);

        // Max-heap on creation id = reverse topological order. Dedup via the
        // map: a node reached over several paths is expanded once, after all
        // its upstream contributions have been merged.
        let mut heap = std::collections::BinaryHeap::new();
        let mut enqueued: HashMap<u64, Tensor<F>> = HashMap::new();
        heap.push(self.id());
        enqueued.insert(self.id(), self.clone());

        while let Some(id) = heap.pop() {
            let node = enqueued.remove(&id).expect("heap/map out of sync");
            let upstream = grads.remove(&id).expect("no gradient for queued node");

            if node.is_param() {
                node.accumulate_grad(&upstream);
                continue;
            }
            let Some(record) = node.op_record() else {
                continue; // untracked constant on some input edge
            };

            let contributions = (record.backward)(&upstream);
            debug_assert_eq!(contributions.len(), record.inputs.len());
            for (input, contribution) in record.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                if !input.needs_grad() {
                    continue;
                }
                debug_assert_eq!(contribution.len(), input.len());
                match grads.entry(input.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        axpy(e.get_mut(), &contribution);
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(contribution);
                        heap.push(input.id());
                        enqueued.insert(input.id(), input.clone());
                    }
                }
            }
        }
        Ok(())
    }
}
