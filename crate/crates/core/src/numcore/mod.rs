//! Dense `f64` tensors, a reverse-mode tape over a fixed set of operators,
//! and an Adam optimizer.

mod params;
mod tape;
mod tensor;

pub use params::{adam_step, AdamConfig, ParamId, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmin, mse, sq_dist_rows, Tensor};

use rand::Rng;

/// Uniform Glorot initialization for an `fan_in x fan_out` weight matrix.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("shape matches data length")
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// parameter `id`.
pub fn finite_difference<F>(store: &mut ParamStore, id: ParamId, h: f64, mut f: F) -> crate::Result<Tensor>
where
    F: FnMut(&ParamStore) -> crate::Result<f64>,
{
    let (rows, cols) = store.value(id).shape();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows * cols {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let up = f(store)?;
        store.value_mut(id).data_mut()[i] = orig - h;
        let down = f(store)?;
        store.value_mut(id).data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let denom = a.norm().max(b.norm());
    if denom == 0.0 {
        return 0.0;
    }
    a.sub(b).expect("same shape").norm() / denom
}
