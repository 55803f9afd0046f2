//! Finite-difference oracle for reverse-mode gradients.
//!
//! The checker is split into pieces (analytic grads, per-coordinate central
//! differences, relative error) so tests can also run negative controls by
//! corrupting the analytic side.

use super::graph::{Graph, TensorId};
use super::rng::StreamRng;
use super::tensor::Precision;
use crate::error::{Error, Result};

/// A loss builder: given a graph and the parameter leaves, record ops and
/// return the scalar loss id.
pub trait LossBuilder: Fn(&mut Graph, &[TensorId]) -> Result<TensorId> {}
impl<F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>> LossBuilder for F {}

fn build_graph(
    build: &impl LossBuilder,
    params: &[(Vec<usize>, Vec<f64>)],
    requires_grad: bool,
) -> Result<(Graph, Vec<TensorId>, TensorId)> {
    let mut g = Graph::new(Precision::F64);
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(shape, data)| g.leaf(shape.clone(), data.clone(), requires_grad))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &ids)?;
    Ok((g, ids, loss))
}

/// Forward-only loss value at the given parameter values.
pub fn forward_value(build: &impl LossBuilder, params: &[(Vec<usize>, Vec<f64>)]) -> Result<f64> {
    let (g, _, loss) = build_graph(build, params, false)?;
    Ok(g.data(loss)[0])
}

/// Reverse-mode gradients for every parameter (zeros where unused).
pub fn analytic_grads(
    build: &impl LossBuilder,
    params: &[(Vec<usize>, Vec<f64>)],
) -> Result<Vec<Vec<f64>>> {
    let (mut g, ids, loss) = build_graph(build, params, true)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(params.iter())
        .map(|(id, (_, data))| g.grad(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; data.len()]))
        .collect())
}

/// Central difference (f(p+eps) - f(p-eps)) / (2 eps) at one coordinate.
pub fn fd_grad_coord(
    build: &impl LossBuilder,
    params: &[(Vec<usize>, Vec<f64>)],
    param_idx: usize,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let mut probe = params.to_vec();
    probe[param_idx].1[coord] += eps;
    let f_plus = forward_value(build, &probe)?;
    probe[param_idx].1[coord] -= 2.0 * eps;
    let f_minus = forward_value(build, &probe)?;
    if !f_plus.is_finite() || !f_minus.is_finite() {
        return Err(Error::Graph(format!(
            "non-finite loss at finite-difference probe (param {param_idx}, coord {coord})"
        )));
    }
    Ok((f_plus - f_minus) / (2.0 * eps))
}

/// Relative error used throughout: |fd - ad| / max(1, |fd|, |ad|).
pub fn rel_err(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / 1.0_f64.max(fd.abs()).max(ad.abs())
}

/// Compare reverse-mode gradients against central finite differences and
/// return the max relative error over the checked coordinates.
///
/// `max_coords` bounds the number of probed coordinates per parameter
/// (seeded subsample); `None` checks every coordinate.
pub fn grad_check(
    build: &impl LossBuilder,
    params: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut StreamRng,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let grads = analytic_grads(build, params)?;
    let mut worst = 0.0_f64;
    for (pi, (_, data)) in params.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < data.len() => rng.sample_indices(data.len(), k),
            _ => (0..data.len()).collect(),
        };
        for ci in coords {
            let fd = fd_grad_coord(build, params, pi, ci, eps)?;
            worst = worst.max(rel_err(fd, grads[pi][ci]));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    // f(x) = sum(x .* x) : grad = 2x, exact for central differences.
    fn quadratic(g: &mut Graph, ids: &[TensorId]) -> Result<TensorId> {
        let sq = g.mul(ids[0], ids[0])?;
        g.sum(sq)
    }

    #[test]
    fn quadratic_form_is_exact() {
        let params = vec![(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0])];
        let mut rng = StreamRng::new(0, "gc");
        let err = grad_check(&quadratic, &params, 1e-5, None, &mut rng).unwrap();
        assert!(err <= 1e-8, "quadratic rel err {err}");
    }

    #[test]
    fn hand_gradient_of_elementwise_square() {
        // loss = sum(x .* x) at x=[1,2] -> grad [2,4]
        let params = vec![(vec![1, 2], vec![1.0, 2.0])];
        let grads = analytic_grads(&quadratic, &params).unwrap();
        assert_eq!(grads[0], vec![2.0, 4.0]);
    }

    #[test]
    fn corrupted_gradient_rule_is_caught() {
        let params = vec![(vec![1, 3], vec![0.3, -0.7, 1.1])];
        let mut grads = analytic_grads(&quadratic, &params).unwrap();
        grads[0][1] *= 3.0; // fault injection
        let mut worst = 0.0_f64;
        for ci in 0..3 {
            let fd = fd_grad_coord(&quadratic, &params, 0, ci, 1e-5).unwrap();
            worst = worst.max(rel_err(fd, grads[0][ci]));
        }
        assert!(worst > 1e-2, "negative control should fail, got {worst}");
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let params = vec![(vec![1, 1], vec![1.0])];
        let mut rng = StreamRng::new(0, "gc");
        assert!(grad_check(&quadratic, &params, 1e-2, None, &mut rng).is_err());
        assert!(grad_check(&quadratic, &params, 1e-8, None, &mut rng).is_err());
    }
}
