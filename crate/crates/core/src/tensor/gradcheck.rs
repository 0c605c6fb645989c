use super::{Graph, Tensor, TensorError, Var};

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-12)`. `f` must
/// build a one-element loss from the leaf it is handed and must be
/// deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::invalid("finite_diff_check", format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    let analytic = g.backward(loss)?.get_or_zeros(leaf, x.shape());

    let eval = |point: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaf = g.param(point);
        let loss = f(&mut g, leaf)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
