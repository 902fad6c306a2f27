//! Append-only tape for reverse-mode differentiation.
//!
//! Every operation pushes its output value and (when any input requires
//! gradients) a boxed backward node. Insertion order is a topological order,
//! so `backward` is a single reverse sweep.

use ndarray::ArrayD;

use super::Scalar;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Gradient accumulator indexed by tape position.
pub struct Sink<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Sink<F> {
    pub fn add(&mut self, id: usize, contribution: ArrayD<F>) {
        match &mut self.grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Backward behavior of one tape node.
pub trait BackOp<F: Scalar>: Send {
    fn backward(&self, vals: &[ArrayD<F>], grad_out: &ArrayD<F>, sink: &mut Sink<F>);
}

pub struct Tape<F: Scalar> {
    vals: Vec<ArrayD<F>>,
    backs: Vec<Option<Box<dyn BackOp<F>>>>,
    needs: Vec<bool>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { vals: Vec::new(), backs: Vec::new(), needs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.vals[v.0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.vals.push(value);
        self.backs.push(None);
        self.needs.push(requires_grad);
        Var(self.vals.len() - 1)
    }

    /// Insert an op output. `back` is dropped when no parent needs grads.
    pub fn push(
        &mut self,
        value: ArrayD<F>,
        needs: bool,
        back: Option<Box<dyn BackOp<F>>>,
    ) -> Var {
        self.vals.push(value);
        self.backs.push(if needs { back } else { None });
        self.needs.push(needs);
        Var(self.vals.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per tape
    /// node (`None` where no gradient flowed).
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(
            self.vals[loss.0].len(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            self.vals[loss.0].shape()
        );
        let mut sink = Sink { grads: vec![None; self.vals.len()] };
        sink.grads[loss.0] = Some(ArrayD::from_elem(self.vals[loss.0].raw_dim(), F::one()));
        for id in (0..=loss.0).rev() {
            let Some(grad) = sink.grads[id].take() else { continue };
            if let Some(back) = &self.backs[id] {
                back.backward(&self.vals, &grad, &mut sink);
            }
            sink.grads[id] = Some(grad);
        }
        sink.grads
    }
}

#[cfg(test)]
mod tests {
    use super::super::ops;
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_shape_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = ops::sum_all(&mut t, x);
        let grads = t.backward(s);
        let gx = grads[x.0].as_ref().unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_2x() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_shape_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = ops::unary(&mut t, x, ops::Unary::Square);
        let s = ops::sum_all(&mut t, sq);
        let grads = t.backward(s);
        let gx = grads[x.0].as_ref().unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreached_parameter_gets_no_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_shape_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = t.leaf(ArrayD::from_shape_vec(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let s = ops::sum_all(&mut t, x);
        let grads = t.backward(s);
        assert!(grads[y.0].is_none());
    }
}
