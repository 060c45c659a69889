//! Dense `f64` tensors, a reverse-mode tape and finite-difference checking.

mod embd;
mod gradcheck;
mod tape;
mod tensor;

pub use embd::{decode_embd, encode_embd, read_embd, write_embd, EMBD_MAGIC, EMBD_VERSION};
pub(crate) use embd::{read_embd_from, ByteReader};
pub use gradcheck::{
    finite_diff_check, relative_error, CoordCheck, GradCheckOptions, GradCheckReport,
    REL_ERROR_FLOOR,
};
pub use tape::{Tape, Var};
pub(crate) use tensor::log_sum_exp;
pub use tensor::{layer_norm, matmul, scaled_dot_attention, softmax_rows, Tensor};
