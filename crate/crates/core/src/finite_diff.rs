//! Central finite differences, used as an oracle for `backward`.

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::scalar::Scalar;

/// `(L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h` for every coordinate. Costs `2P`
/// loss evaluations.
pub fn finite_diff_gradient<T: Scalar, O: Objective<T>>(objective: &O, params: &mut [T], h: f64) -> Result<Vec<T>> {
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_at(objective, params, &coords, h)
}

/// Central differences at the listed coordinates only. Each coordinate is
/// restored exactly after its two evaluations.
pub fn finite_diff_at<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &mut [T],
    coords: &[usize],
    h: f64,
) -> Result<Vec<T>> {
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step size must be positive, got {h}")));
    }
    if let Some(&i) = coords.iter().find(|&&i| i >= params.len()) {
        return Err(Error::Precondition(format!("coordinate {i} out of range for {} parameters", params.len())));
    }
    let step = T::from_f64(h);
    let two_h = T::from_f64(2.0 * h);
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = params[i];
        params[i] = orig + step;
        let plus = objective.loss(params);
        params[i] = orig - step;
        let minus = objective.loss(params);
        params[i] = orig;
        out.push((plus? - minus?) / two_h);
    }
    Ok(out)
}
