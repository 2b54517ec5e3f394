//! Dense `f64` tensors, a reverse-mode tape, Adam, gradient checking and
//! checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckOptions, GradCheckReport, TensorCheck,
};
pub use params::{Bindings, ModelParams};
pub use tape::{BackwardFault, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Reduction applied by [`pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

/// Reduces `x` along `axis`.
pub fn pool(tape: &mut Tape, x: Var, axis: usize, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Mean => tape.mean_axis(x, axis),
        PoolMode::Max => tape.max_axis(x, axis),
    }
}

/// Cosine similarity of matching last-axis slices of `u` and `v`.
/// Returns shape `[rows]` (`[1]` for vectors).
pub fn cosine_similarity(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    if tape.shape(u) != tape.shape(v) {
        return Err(Error::shape("cosine_similarity", tape.shape(u), tape.shape(v)));
    }
    let shape = tape.shape(u).to_vec();
    let width = *shape.last().unwrap();
    let rows = tape.value(u).numel() / width;
    let nu = tape.normalize(u).map_err(|_| Error::ZeroNorm("cosine_similarity"))?;
    let nv = tape.normalize(v).map_err(|_| Error::ZeroNorm("cosine_similarity"))?;
    let prod = tape.mul(nu, nv)?;
    let prod = tape.reshape(prod, &[rows, width])?;
    let mean = tape.mean_axis(prod, 1)?;
    Ok(tape.scale(mean, width as f64))
}
