//! Numeric foundation: tensors, the traced primitives, finite-difference
//! verification, and optimizers.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use gradcheck::{fd_check, grad_check, grad_check_many, relative_error};
pub use graph::{Grads, Graph, Var};
pub use optim::{OptimAlgorithm, OptimConfig, OptimState};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A primitive operation together with its non-tensor arguments.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive<T> {
    MatMul,
    MatMulBt,
    Add,
    AddRow,
    Scale(T),
    Mul,
    Gather(Vec<usize>),
    LayerNorm,
    Gelu,
    Softmax,
    LogSoftmax,
    Log,
    Sum,
    Mean,
    Concat(usize),
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    MaskedFill { mask: Vec<bool>, fill: T },
    Pick(Vec<usize>),
    WeightedSum(Vec<T>),
}

impl<T: Real> Primitive<T> {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::MatMulBt
            | Primitive::Add
            | Primitive::AddRow
            | Primitive::Mul
            | Primitive::Concat(_) => 2,
            Primitive::LayerNorm => 3,
            _ => 1,
        }
    }

    /// Records this primitive on `g`.
    pub fn apply(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.arity() {
            return Err(Error::Invalid(format!(
                "{self:?} takes {} inputs, got {}",
                self.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        match self {
            Primitive::MatMul => g.matmul(x, inputs[1]),
            Primitive::MatMulBt => g.matmul_bt(x, inputs[1]),
            Primitive::Add => g.add(x, inputs[1]),
            Primitive::AddRow => g.add_row(x, inputs[1]),
            Primitive::Scale(c) => g.scale(x, *c),
            Primitive::Mul => g.mul(x, inputs[1]),
            Primitive::Gather(ids) => g.gather(x, ids),
            Primitive::LayerNorm => g.layernorm(x, inputs[1], inputs[2]),
            Primitive::Gelu => g.gelu(x),
            Primitive::Softmax => g.softmax(x),
            Primitive::LogSoftmax => g.log_softmax(x),
            Primitive::Log => g.log(x),
            Primitive::Sum => g.sum(x),
            Primitive::Mean => g.mean(x),
            Primitive::Concat(axis) => g.concat(x, inputs[1], *axis),
            Primitive::SliceRows { start, len } => g.slice_rows(x, *start, *len),
            Primitive::SliceCols { start, len } => g.slice_cols(x, *start, *len),
            Primitive::MaskedFill { mask, fill } => g.masked_fill(x, mask, *fill),
            Primitive::Pick(idx) => g.pick(x, idx),
            Primitive::WeightedSum(w) => g.weighted_sum(x, w),
        }
    }
}

/// Evaluates one primitive without tracing.
pub fn primitive_forward<T: Real>(op: &Primitive<T>, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = op.apply(&mut g, &vars)?;
    Ok(g.value(out).clone())
}
