use super::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * step);
    }
    out
}

/// Largest violation of `|a - n| <= max(rel · max(|a|, |n|), abs_floor)`,
/// as the ratio of error to allowance. Values at or below 1 pass.
pub fn gradient_mismatch(analytic: &Tensor, numeric: &Tensor, rel: f64, abs_floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| {
            let allow = (rel * a.abs().max(n.abs())).max(abs_floor);
            (a - n).abs() / allow
        })
        .fold(0.0, f64::max)
}
