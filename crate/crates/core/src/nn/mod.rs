//! Small fixed-shape MLP substrate: batched forward/backward with an explicit
//! layer trace, Adam, and a finite-difference gradient checker.
//!
//! Parameters are stored as `f32`; all arithmetic runs in `f64`.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use mlp::{Activation, Dense, DenseGrad, Gradients, Mlp, Trace};

/// Mean-squared-error loss over a batch and its gradient w.r.t. `prediction`.
pub fn mse(prediction: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let n = prediction.as_slice().len().max(1) as f64;
    let mut grad = Matrix::zeros(prediction.rows(), prediction.cols());
    let mut total = 0.0;
    for ((g, p), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(prediction.as_slice())
        .zip(target.as_slice())
    {
        let d = p - t;
        total += d * d;
        *g = 2.0 * d / n;
    }
    (total / n, grad)
}

/// Mean absolute error summed over columns, averaged over rows, with its
/// subgradient (sign, zero at zero).
pub fn l1(prediction: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let rows = prediction.rows().max(1) as f64;
    let mut grad = Matrix::zeros(prediction.rows(), prediction.cols());
    let mut total = 0.0;
    for ((g, p), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(prediction.as_slice())
        .zip(target.as_slice())
    {
        let d = p - t;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / rows
        } else if d < 0.0 {
            -1.0 / rows
        } else {
            0.0
        };
    }
    (total / rows, grad)
}
