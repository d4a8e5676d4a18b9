use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let y = f(&g, &vars)?;
    Ok(g.scalar(y))
}

/// Compares tape gradients of `f` against central differences with step `eps`.
///
/// Returns the largest [`relative_error`] over every entry of every
/// parameter. `f` is evaluated twice at the base point first; differing
/// results are reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let base1 = eval(params, &f)?;
    let base2 = eval(params, &f)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.param(pi).expect("registered");
        for j in 0..p.len() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let up = eval(&probe, &f)?;
            probe[pi].data_mut()[j] = orig - eps;
            let down = eval(&probe, &f)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::from_vec(vec![0.3, -1.2, 2.5])];
        let err = finite_diff_check(&p, 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0]);
            let s = g.mul_scalar(sq, 1.7);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let p = vec![Tensor::scalar(1.0)];
        let r = finite_diff_check(&p, 0.0, |g, v| Ok(g.mul(v[0], v[0])));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nondeterminism_detected() {
        let p = vec![Tensor::scalar(1.0)];
        let calls = Cell::new(0.0);
        let r = finite_diff_check(&p, 1e-5, |g, v| {
            calls.set(calls.get() + 1.0);
            Ok(g.add_scalar(v[0], calls.get()))
        });
        assert!(matches!(r, Err(Error::NonDeterministic)));
    }
}
