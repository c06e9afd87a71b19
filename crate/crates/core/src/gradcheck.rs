//! Central finite differences, used to check analytic gradients from the
//! graph against forward evaluations only.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of one scalar among several input tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub index: usize,
}

/// Every scalar of every input.
pub fn all_coords(inputs: &[Tensor]) -> Vec<Coord> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(input, t)| (0..t.numel()).map(move |index| Coord { input, index }))
        .collect()
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` at each coordinate.
pub fn numeric_gradient<F>(mut f: F, inputs: &[Tensor], coords: &[Coord], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("numeric_gradient", "step must be positive"));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for c in coords {
        let t = work
            .get_mut(c.input)
            .ok_or_else(|| Error::invalid("numeric_gradient", format!("no input {}", c.input)))?;
        if c.index >= t.numel() {
            return Err(Error::invalid("numeric_gradient", format!("index {} out of range", c.index)));
        }
        let x = t.data()[c.index];
        work[c.input].data_mut()[c.index] = x + h;
        let up = f(&work)?;
        work[c.input].data_mut()[c.index] = x - h;
        let down = f(&work)?;
        work[c.input].data_mut()[c.index] = x;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Picks the analytic values at `coords` from per-input gradient tensors.
pub fn gather(grads: &[Tensor], coords: &[Coord]) -> Vec<f64> {
    coords.iter().map(|c| grads[c.input].data()[c.index]).collect()
}

/// `max |a − n| / max(1, max |n|)`: relative to the gradient scale once it
/// exceeds 1, absolute below that.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let x = vec![Tensor::from_vec(vec![0.5, -2.0])];
        let g = numeric_gradient(|t| Ok(t[0].data().iter().map(|v| v * v * v).sum()), &x, &all_coords(&x), 1e-5).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-9 && (g[1] - 12.0).abs() < 1e-8, "{g:?}");
    }

    #[test]
    fn error_scale() {
        assert_eq!(relative_error(&[0.1], &[0.1000001]), (0.1f64 - 0.1000001).abs());
        assert!((relative_error(&[101.0], &[100.0]) - 0.01).abs() < 1e-15);
    }
}
