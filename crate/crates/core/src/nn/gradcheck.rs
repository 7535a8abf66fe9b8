use crate::rng::Rng;

/// Central finite-difference check of `analytic` against `loss` at `params`.
///
/// Parameters are stored in `f32`, so the perturbed values are rounded; the
/// difference quotient divides by the perturbation actually applied. Returns
/// the maximum over probed coordinates of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`; any non-finite quantity
/// yields `f64::INFINITY`.
pub fn grad_check<F>(
    mut loss: F,
    params: &[f32],
    analytic: &[f64],
    probe_count: usize,
    step: f64,
    rng: &mut Rng,
) -> f64
where
    F: FnMut(&[f32]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let n = params.len();
    let probes: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        (0..probe_count).map(|_| rng.index(n)).collect()
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in probes {
        let base = params[i];
        let plus = (f64::from(base) + step) as f32;
        let minus = (f64::from(base) - step) as f32;
        work[i] = plus;
        let up = loss(&work);
        work[i] = minus;
        let down = loss(&work);
        work[i] = base;
        let fd = (up - down) / (f64::from(plus) - f64::from(minus));
        let a = analytic[i];
        let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}
