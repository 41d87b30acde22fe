//! Dense tensor with shared storage and an optional gradient slot.
//!
//! A `Tensor` is a cheap handle (`Rc`) onto flat row-major storage. Clones
//! share the same buffer; the tape records handles so the backward pass can
//! deposit gradients into the very tensors the caller holds. Feature maps
//! are ordered batch x channels x height x width.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::Elem;

struct Inner {
    shape: Vec<usize>,
    data: Vec<Elem>,
    requires_grad: bool,
    grad: Option<Vec<Elem>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<Elem>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn filled(shape: &[usize], value: Elem) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: Elem) -> Self {
        Self::raw(vec![], vec![value], false)
    }

    /// A trainable parameter: same as `from_vec` but with `requires_grad` set.
    pub fn param(shape: &[usize], data: Vec<Elem>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    fn raw(shape: Vec<usize>, data: Vec<Elem>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Scalar tensors have an empty shape; rank-0 or single-element rank-1
    /// both count as scalar for loss seeding.
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> Elem {
        let b = self.inner.borrow();
        assert_eq!(b.data.len(), 1, "item() on non-scalar tensor");
        b.data[0]
    }

    pub fn data(&self) -> Ref<'_, [Elem]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, [Elem]> {
        RefMut::map(self.inner.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<Elem> {
        self.inner.borrow().data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    pub fn grad(&self) -> Option<Ref<'_, [Elem]>> {
        let b = self.inner.borrow();
        if b.grad.is_some() {
            Some(Ref::map(b, |i| i.grad.as_ref().unwrap().as_slice()))
        } else {
            None
        }
    }

    pub fn grad_to_vec(&self) -> Option<Vec<Elem>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Add `g` into the gradient slot, creating it zero-filled on first use.
    pub(crate) fn accumulate_grad(&self, g: &[Elem]) {
        let mut b = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), b.data.len());
        match &mut b.grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => b.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn seed_grad(&self, g: Vec<Elem>) {
        self.inner.borrow_mut().grad = Some(g);
    }

    /// Two handles onto the same storage?
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        if self.inner.borrow().data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, grad={})",
            b.shape,
            b.requires_grad,
            if b.grad.is_some() { "set" } else { "none" }
        )
    }
}

/// Row-major offset helpers for rank-4 feature maps.
#[inline]
pub fn idx4(shape: &[usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn clones_share_storage() {
        let t = Tensor::zeros(&[3]);
        let u = t.clone();
        u.data_mut()[1] = 5.0;
        assert_eq!(t.to_vec(), vec![0.0, 5.0, 0.0]);
        assert!(t.same_storage(&u));
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad_to_vec().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::from_vec(&[1], vec![Elem::NAN]).unwrap();
        assert!(t.assert_finite("test").is_err());
    }
}
