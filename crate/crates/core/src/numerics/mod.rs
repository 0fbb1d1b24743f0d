//! Dense tensors, seeded random streams and the linear-algebra kernels the
//! rest of the crate builds on. Everything is `f64`, row-major and contiguous.

mod kernels;
mod params;
mod rng;
mod tensor;

pub(crate) use kernels::{
    cosine_backward, cosine_sim, gemm, gemm_a_bt_acc, gemm_at_b_acc, softmax_row_backward, softmax_row_inplace,
    COSINE_EPS,
};
pub use kernels::{cosine_rows, logdet_psd, matmul, rowwise_softmax};
pub(crate) use params::{bank, bank_mut};
pub use params::{Bank, BankMut, ParamSet};
pub use rng::RngState;
pub use tensor::Tensor;
