//! Dense n-dimensional tensors with an optional gradient accumulator.
//!
//! A `Tensor` is a cheaply clonable handle (`Rc`) to shared storage, so the
//! same parameter object can be referenced by layers, the tape and an
//! optimizer. Tensors belong to a single run and are not `Send`.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::scalar::Scalar;

struct Inner<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
}

pub struct Tensor<E: Scalar> {
    inner: Rc<RefCell<Inner<E>>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![E::zero(); numel])
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Normal samples scaled by `std`, drawn by Box-Muller from the given rng.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(E::from_f64(r * theta.cos() * std));
            if data.len() < numel {
                data.push(E::from_f64(r * theta.sin() * std));
            }
        }
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        RefMut::map(self.inner.borrow_mut(), |i| &mut i.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    pub fn requires_grad_(self, v: bool) -> Self {
        self.set_requires_grad(v);
        self
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<E> {
        let inner = self.inner.borrow();
        inner
            .grad
            .clone()
            .unwrap_or_else(|| vec![E::zero(); inner.data.len()])
    }

    pub fn has_grad(&self) -> bool {
        self.inner.borrow().grad.is_some()
    }

    pub fn accumulate_grad(&self, delta: &[E]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), inner.data.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Stable identity of the underlying storage; two handles share weights
    /// exactly when their ids are equal.
    pub fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Deep copy of values only; gradient state is not carried over.
    pub fn detached_copy(&self) -> Self {
        let inner = self.inner.borrow();
        Self::from_parts(inner.shape.clone(), inner.data.clone())
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor{:?} requires_grad={} [",
            inner.shape, inner.requires_grad
        )?;
        for (i, v) in inner.data.iter().take(8).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if inner.data.len() > 8 {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
