//! Central finite differences, used as an oracle for analytic gradients.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate.
pub fn central_difference<F>(x: &mut [f64], i: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Full numeric gradient of `f` at `x`.
pub fn numeric_gradient<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x.to_vec();
    (0..x.len()).map(|i| central_difference(&mut x, i, h, &mut f)).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
