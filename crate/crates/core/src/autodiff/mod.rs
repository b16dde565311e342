//! Minimal reverse-mode differentiation over dense `f32` tensors.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_grad_f64, grad_close};
pub use optim::{AdamHyper, AdamState};
pub(crate) use tape::softmax_row;
pub use tape::{Elementwise, Gradients, Operand, Tape, Var};
pub use tensor::{matmul, Tensor};

/// Row-wise softmax of a `B×n` matrix.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.cols();
    let data = logits
        .data()
        .chunks(n)
        .flat_map(|row| softmax_row(row).0)
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}
