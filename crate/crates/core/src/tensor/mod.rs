//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every value in the model — parameters, activations, losses — is a
//! [`Tensor`]: a row-major buffer plus shape. Operations on tensors that
//! involve at least one gradient-tracked input record themselves as nodes of
//! an implicit tape (the chain of op records hanging off each result), which
//! [`Tensor::backward`] replays in reverse topological order. The tape is
//! rebuilt on every forward pass; operations on plain data record nothing and
//! run at full speed.
//!
//! Tensors are generic over [`Real`]: training and inference run in `f32`,
//! gradient checking runs the same code in `f64` where central finite
//! differences are accurate enough for tight tolerances.
//!
//! A tensor graph is confined to one thread (`Tensor` is intentionally
//! `!Send`); parallelism happens across independent graphs.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

mod backward;
pub mod gradcheck;
pub mod io;
mod ops;

pub use io::{read_tensor_f32, write_tensor_f32, TensorIoError, VCAP_MAGIC};

/// Scalar element type of a tensor: `f32` for training, `f64` for gradient
/// checking. The conversions are plain casts so both types share one code path.
pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + Sum + fmt::Debug + fmt::Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} does not hold {len} elements")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: argument must be strictly positive")]
    Domain { op: &'static str },
    #[error("{op}: empty operand list or empty range")]
    Empty { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },
    #[error("backward on a tensor that was not recorded on the tape")]
    BackwardDetached,
    #[error("cross_entropy: target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: u32, classes: usize },
    #[error("cross_entropy: every position is padding")]
    AllPadded,
}

/// Gradient rule of a recorded op: maps the output gradient to one
/// contribution per input (`None` for inputs that do not need one).
pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F]) -> Vec<Option<Vec<F>>>>;

pub(crate) struct OpRecord<F: Real> {
    #[allow(dead_code)]
    pub name: &'static str,
    pub inputs: Vec<Tensor<F>>,
    pub backward: BackwardFn<F>,
}

struct Inner<F: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<F>>>,
    /// On the gradient path: a tracked leaf, or an op with a tracked input.
    needs_grad: bool,
    /// Gradient slot; present only on tracked leaves (parameters).
    grad: Option<RefCell<Option<Vec<F>>>>,
    op: Option<OpRecord<F>>,
}

/// A dense row-major tensor. Cheap to clone (shared buffer).
pub struct Tensor<F: Real = f32>(Rc<Inner<F>>);

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn check_shape<F>(op: &'static str, shape: &[usize], data: &[F]) -> Result<(), TensorError> {
    let expect: usize = shape.iter().product();
    if shape.iter().any(|&e| e == 0) || expect != data.len() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            len: data.len(),
        });
    }
    Ok(())
}

impl<F: Real> Tensor<F> {
    /// Plain data leaf; not tracked by the tape.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        check_shape("new", &shape, &data)?;
        Ok(Self::leaf(shape, data, false))
    }

    /// Trainable leaf: tracked, receives a gradient on `backward`.
    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        check_shape("param", &shape, &data)?;
        Ok(Self::leaf(shape, data, true))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape, vec![F::zero(); n], false)
    }

    pub fn scalar(v: F) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self::leaf(vec![n], data, false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<F>, tracked: bool) -> Self {
        debug_assert_finite(if tracked { "param" } else { "leaf" }, &data);
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: Rc::new(RefCell::new(data)),
            needs_grad: tracked,
            grad: tracked.then(|| RefCell::new(None)),
            op: None,
        }))
    }

    /// Record the result of an op. `make_backward` is only invoked when some
    /// input is tracked, so untracked forward passes skip both the closure
    /// and its saved activations.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        name: &'static str,
        inputs: Vec<Tensor<F>>,
        make_backward: impl FnOnce(&[F]) -> BackwardFn<F>,
    ) -> Self {
        debug_assert_finite(name, &data);
        let needs_grad = inputs.iter().any(|t| t.0.needs_grad);
        let op = needs_grad.then(|| OpRecord {
            name,
            backward: make_backward(&data),
            inputs,
        });
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: Rc::new(RefCell::new(data)),
            needs_grad,
            grad: None,
            op,
        }))
    }

    /// View of the same buffer, off the tape. Parameter updates stay visible
    /// through the view, so detached model copies track training.
    pub fn detach(&self) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            needs_grad: false,
            grad: None,
            op: None,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Monotone creation id; inputs of an op always have smaller ids than the
    /// op's result, which is what `backward` sorts by.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    /// Whether this is a trainable leaf.
    pub fn is_param(&self) -> bool {
        self.0.grad.is_some()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Accumulated gradient of a trainable leaf, if `backward` has run.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.as_ref().and_then(|g| g.borrow().clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.0.grad {
            *g.borrow_mut() = None;
        }
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[F]) {
        let slot = self
            .0
            .grad
            .as_ref()
            .expect("accumulate_grad on a non-parameter tensor");
        let mut slot = slot.borrow_mut();
        match slot.as_mut() {
            Some(g) => axpy(g, contribution),
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Replace the buffer contents in place. Meant for parameter updates and
    /// finite-difference probes; mutating a tensor that participates in a
    /// live graph between forward and backward is a logic error.
    pub fn set_data(&self, data: Vec<F>) -> Result<(), TensorError> {
        check_shape("set_data", &self.0.shape, &data)?;
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn op_record(&self) -> Option<&OpRecord<F>> {
        self.0.op.as_ref()
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.0.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: self.0.shape.clone(),
            }),
        }
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("tracked", &self.0.needs_grad)
            .finish()
    }
}

pub(crate) fn axpy<F: Real>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Forward outputs must stay finite; in debug builds every op asserts it so
/// divergence is caught at the op that produced it.
fn debug_assert_finite<F: Real>(op: &str, data: &[F]) {
    if cfg!(debug_assertions) {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            panic!("{op}: non-finite value {} at index {pos}", data[pos]);
        }
    }
}
