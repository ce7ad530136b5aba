//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns row-major data plus an optional gradient buffer. Graphs
//! are built define-by-run on a [`Tape`]: every forward call records the op
//! and its saved state, `backward` walks the record once in reverse. Tapes
//! are rebuilt per forward pass; parameters persist across steps and are
//! re-registered as leaves each pass.

mod tape;

pub use tape::{NodeId, Tape};

use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array of f32 in row-major order.
///
/// `data` is shared (`Arc`) so registering a tensor on a tape never copies
/// the payload; the optimizer mutates it between steps when the tape is gone.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Accumulated gradient, same shape as `data` when present.
    pub grad: Option<Vec<f32>>,
    /// Whether gradients flow into this tensor during backward.
    pub requires_grad: bool,
    /// Tape binding for the current pass: (tape epoch, node id).
    node: Cell<Option<(u64, usize)>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
            node: Cell::new(None),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).unwrap()
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).unwrap()
    }

    /// Gaussian-initialized tensor, deterministic per RNG state.
    pub fn randn(shape: Vec<usize>, mean: f32, std: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| mean + std * normal(rng)).collect();
        Tensor::new(shape, data).unwrap()
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the values. Clones only if a tape still shares the
    /// buffer, which does not happen in the step loop (tapes are dropped
    /// before the optimizer runs).
    pub fn values_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn set_data(&mut self, data: Vec<f32>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Contract(format!(
                "set_data length {} does not match shape {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data = Arc::new(data);
        Ok(())
    }

    /// Add `g` into the persistent gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.numel());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn binding(&self) -> &Cell<Option<(u64, usize)>> {
        &self.node
    }
}

/// Named parameter. Trainability is carried by the tensor's `requires_grad`.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor, trainable: bool) -> Self {
        Param {
            name: name.into(),
            tensor: tensor.requires_grad(trainable),
        }
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }

    pub fn set_trainable(&mut self, yes: bool) {
        self.tensor.requires_grad = yes;
    }
}

/// Standard-normal sample via Box-Muller; two uniform draws per call keeps
/// RNG consumption order fixed.
pub fn normal(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
