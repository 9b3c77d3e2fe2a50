//! Dense tensors with a reverse-mode tape, restricted to the operations the
//! separation network and its loss use.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    check_primitives, compare_at, gradient_check, gradient_check_at, relative_error, CoordCheck, DEFAULT_EPS,
};
pub use tape::{from_spectrogram, si_sdr_db, si_sdr_db_clamped, to_spectrogram, Gradients, Tape, Var, SI_SDR_CLAMP_DB};
pub use tensor::Tensor;
