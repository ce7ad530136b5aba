//! Finite-difference gradient checking.
//!
//! The oracle re-evaluates the scalar loss through the same forward path with
//! perturbed parameters; it is independent of the backward implementation it
//! checks. Used by the unit tests and the acceptance suite.

/// Central finite differences of `loss` w.r.t. every coordinate of every
/// parameter vector.
pub fn numeric_grads<F>(mut loss: F, params: &[Vec<f32>], eps: f32) -> Vec<Vec<f32>>
where
    F: FnMut(&[Vec<f32>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0f32; params[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            plus[p][i] += eps;
            let lp = loss(&plus);
            let mut minus = params.to_vec();
            minus[p][i] -= eps;
            let lm = loss(&minus);
            *gi = ((lp - lm) / (2.0 * eps as f64)) as f32;
        }
        grads.push(g);
    }
    grads
}

/// Central finite differences at selected coordinates of one parameter.
pub fn numeric_grad_at<F>(mut loss: F, base: &[f32], coords: &[usize], eps: f32) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let mut plus = base.to_vec();
            plus[i] += eps;
            let lp = loss(&plus);
            let mut minus = base.to_vec();
            minus[i] -= eps;
            let lm = loss(&minus);
            ((lp - lm) / (2.0 * eps as f64)) as f32
        })
        .collect()
}

/// Worst disagreement between analytic and numeric gradients, relative to
/// the gradient's overall scale. Normalizing per coordinate would let
/// finite-difference noise dominate entries that happen to sit near zero.
pub fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f32, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / scale)
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_recovered() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i
        let params = vec![vec![0.5f32, -1.25, 2.0]];
        let g = numeric_grads(
            |p| p[0].iter().map(|&v| v as f64 * v as f64).sum(),
            &params,
            1e-3,
        );
        let expect = [1.0f32, -2.5, 4.0];
        assert!(max_rel_err(&expect, &g[0]) < 1e-3);
    }

    #[test]
    fn rel_err_detects_disagreement() {
        assert!(max_rel_err(&[1.0, 2.0], &[1.0, 2.2]) > 0.05);
    }
}
