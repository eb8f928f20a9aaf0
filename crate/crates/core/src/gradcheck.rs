//! Central finite-difference gradients, used as an independent oracle for
//! the autodiff engine. Only forward evaluation is involved.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every entry of every
/// input tensor.
pub fn numeric_gradient<F, E>(inputs: &[Tensor], step: f64, mut f: F) -> Result<Vec<Tensor>, E>
where
    F: FnMut(&[Tensor]) -> Result<f64, E>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        grads.push(Tensor::from_parts(inputs[t].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Fourth-order five-point stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. Truncation error is
/// O(h^4), so a larger step keeps rounding noise down on large objectives.
pub fn numeric_gradient_five_point<F, E>(
    inputs: &[Tensor],
    step: f64,
    mut f: F,
) -> Result<Vec<Tensor>, E>
where
    F: FnMut(&[Tensor]) -> Result<f64, E>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            let mut at = |offset: f64, work: &mut Vec<Tensor>| {
                work[t].data_mut()[i] = orig + offset;
                f(work)
            };
            let p2 = at(2.0 * step, &mut work)?;
            let p1 = at(step, &mut work)?;
            let m1 = at(-step, &mut work)?;
            let m2 = at(-2.0 * step, &mut work)?;
            work[t].data_mut()[i] = orig;
            *gi = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
        }
        grads.push(Tensor::from_parts(inputs[t].shape().to_vec(), g));
    }
    Ok(grads)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest entrywise [`relative_error`] across matched tensor lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y, floor))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
