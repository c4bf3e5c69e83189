//! Dense row-major arrays with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations on tensors
//! that require gradients record their parents; [`Tensor::backward`] walks the
//! recorded graph in reverse topological order and accumulates into the
//! `grad` slot of every leaf that asked for one.
//!
//! Values are held as `f64` regardless of [`DType`]. An `F32` tensor keeps
//! every stored value rounded to the nearest `f32`, so it behaves like single
//! precision storage with double precision arithmetic inside each kernel.

mod gradcheck;
mod io;
mod ops;

pub use gradcheck::{grad_check, GradReport};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor};

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::rng::Rng;

use ops::Op;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    fn round_all(self, mut data: Vec<f64>) -> Vec<f64> {
        if self == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        data
    }
}

pub(crate) struct Node {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.0.dtype)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a constant tensor. Values are rounded to `dtype`.
    pub fn new(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(dtype.round_all(data), shape.to_vec(), dtype, false, None))
    }

    /// A leaf that collects gradients.
    pub fn param(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Self> {
        Ok(Self::new(data, shape, dtype)?.requires_grad())
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::from_parts(vec![0.0; numel(shape)], shape.to_vec(), dtype, false, None)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        Self::from_parts(vec![dtype.round(value); numel(shape)], shape.to_vec(), dtype, false, None)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(&[], value, dtype)
    }

    pub fn randn(shape: &[usize], std: f64, dtype: DType, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| std * rng.normal()).collect();
        Self::from_parts(dtype.round_all(data), shape.to_vec(), dtype, false, None)
    }

    pub(crate) fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        requires_grad: bool,
        op: Option<Op>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node { shape, dtype, data, requires_grad, grad: Mutex::new(None), op }))
    }

    /// Same values as a fresh gradient-collecting leaf.
    pub fn requires_grad(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), self.0.dtype, true, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), self.0.dtype, false, None)
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        Self::from_parts(dtype.round_all(self.0.data.clone()), self.0.shape.clone(), dtype, false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [a, b] => Ok((*a, *b)),
            s => Err(Error::Shape(format!("expected a rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("item() on shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor> {
        self.grad().map(|g| Self::from_parts(g, self.0.shape.clone(), self.0.dtype, false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape, dtype and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self.dtype() == other.dtype()
            && self.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn node_key(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// Reverse-mode pass from a one-element tensor. Gradients are added to
    /// whatever the leaves already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }

        // Post-order DFS gives a topological order with parents first.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: std::collections::HashSet<*const Node> = Default::default();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.node_key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.0.requires_grad && !seen.contains(&p.node_key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.node_key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node_key()) else { continue };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a = t.0.dtype.round(*a + v);
                            }
                        }
                        None => *slot = Some(t.0.dtype.round_all(g)),
                    }
                }
                Some(op) => {
                    for (parent, pg) in op.backward(&t.0, &g) {
                        if !parent.0.requires_grad {
                            continue;
                        }
                        match grads.get_mut(&parent.node_key()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&pg) {
                                    *a += v;
                                }
                            }
                            None => {
                                grads.insert(parent.node_key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
