//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::gradcore::graph::{Graph, Var};
use crate::gradcore::tensor::Tensor;
use crate::scalar::Real;

/// `|a - fd| / max(|a|, |fd|, T::FD_FLOOR)`.
pub fn relative_error<T: Real>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(T::FD_FLOOR));
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against fourth-order central differences of `eval`
/// around `point`, perturbing every coordinate of every tensor. Returns the
/// largest relative error.
pub fn fd_check<T: Real>(
    eval: impl Fn(&[Tensor<T>]) -> Result<T>,
    analytic: &[Tensor<T>],
    point: &[Tensor<T>],
    eps: T,
) -> Result<T> {
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "fd_check",
            format!("{} gradients for {} inputs", analytic.len(), point.len()),
        ));
    }
    let mut work: Vec<Tensor<T>> = point.to_vec();
    let mut worst = T::zero();
    for (t, grad) in analytic.iter().enumerate() {
        if grad.shape() != point[t].shape() {
            return Err(Error::shape(
                "fd_check",
                format!("gradient {:?} for input {:?}", grad.shape(), point[t].shape()),
            ));
        }
        for i in 0..point[t].len() {
            let x0 = point[t].data()[i];
            let mut at = |h: T| -> Result<T> {
                work[t].data_mut()[i] = x0 + h;
                let y = eval(&work)?;
                if !y.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("fd_check at input {t}[{i}]"),
                    });
                }
                Ok(y)
            };
            let (p1, m1) = (at(eps)?, at(-eps)?);
            let (p2, m2) = (at(eps + eps)?, at(-(eps + eps))?);
            work[t].data_mut()[i] = x0;
            let numeric = (T::lit(8.0) * (p1 - m1) - (p2 - m2)) / (T::lit(12.0) * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check for a scalar function of several tensors built on a tape.
pub fn grad_check_many<T: Real, F>(f: F, point: &[Tensor<T>], eps: T) -> Result<T>
where
    F: for<'g> Fn(&mut Graph<'g, T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = point
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?.wrt(&g, &vars);
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    fd_check(eval, &grads, point, eps)
}

/// Gradient check for a scalar function of a single tensor.
pub fn grad_check<T: Real, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T>
where
    F: for<'g> Fn(&mut Graph<'g, T>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(point), eps)
}
