//! Dense 2-D tensor with a gradient slot.
//!
//! All tensors are row-major matrices; vectors are 1×n rows and scalars 1×1.
//! Values sit behind a RefCell so the optimizer can update parameters in
//! place; gradients accumulate into an optional buffer of the same shape.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

struct Inner {
    rows: usize,
    cols: usize,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Shared handle to a tensor; clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.rows())
            .field("cols", &self.cols())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            values.len(),
            rows * cols,
            "tensor values length {} does not match shape {rows}x{cols}",
            values.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                rows,
                cols,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn zeros(rows: usize, cols: usize, requires_grad: bool) -> Tensor {
        Tensor::new(rows, cols, vec![0.0; rows * cols], requires_grad)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(1, 1, vec![v], false)
    }

    pub fn row(values: Vec<f64>) -> Tensor {
        Tensor::new(1, values.len(), values, false)
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn len(&self) -> usize {
        self.inner.rows * self.inner.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.rows == 1 && self.inner.cols == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.values.borrow_mut()
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on a {}x{} tensor", self.rows(), self.cols());
        self.inner.values.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accum_grad(&self, delta: &[f64]) {
        assert_eq!(delta.len(), self.len(), "gradient length mismatch");
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Adds one gradient row per id: delta row i accumulates into row
    /// row_ids[i]. Avoids materializing a full dense delta for lookup tables.
    pub fn accum_grad_rows(&self, row_ids: &[usize], delta: &[f64]) {
        let d = self.cols();
        assert_eq!(delta.len(), row_ids.len() * d, "gradient row length mismatch");
        let len = self.len();
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; len]);
        for (i, &r) in row_ids.iter().enumerate() {
            for j in 0..d {
                g[r * d + j] += delta[i * d + j];
            }
        }
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.values.borrow().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_alias_storage() {
        let t = Tensor::zeros(2, 2, true);
        let u = t.clone();
        t.values_mut()[3] = 5.0;
        assert_eq!(u.values()[3], 5.0);
        assert!(t.same_storage(&u));
    }

    #[test]
    fn grad_accumulates_from_none() {
        let t = Tensor::zeros(1, 3, true);
        assert!(t.grad().is_none());
        t.accum_grad(&[1.0, 2.0, 3.0]);
        t.accum_grad(&[1.0, 0.0, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_mismatch_panics() {
        Tensor::new(2, 2, vec![0.0; 3], false);
    }
}
