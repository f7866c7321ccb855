use rand::seq::index::sample;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::rng::StreamKey;
use crate::tensor::Tensor;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
    /// Largest relative error per parameter.
    pub per_param: Vec<f64>,
    /// Largest |analytic| and |numeric| derivative seen per parameter.
    pub per_param_scale: Vec<f64>,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`.
///
/// At most `coords_per_param` coordinates of each parameter are probed,
/// chosen by `key`; smaller parameters are probed exhaustively. `f` is
/// called once on a tracking graph and twice per probed coordinate on
/// inference graphs, so it must be deterministic given its inputs.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    coords_per_param: usize,
    key: StreamKey,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(invalid(
            "grad_check",
            format!("step must be positive, got {h}"),
        ));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match g.grad(v) {
            Some(grad) => grad.to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    drop(g);

    let eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = work.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        per_param: vec![0.0; params.len()],
        per_param_scale: vec![0.0; params.len()],
    };
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let mut rng = key.index(pi as u64).rng();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_param).into_vec()
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coordinates_checked += 1;
            report.per_param[pi] = report.per_param[pi].max(rel);
            report.per_param_scale[pi] = report.per_param_scale[pi].max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_under_central_differences() {
        let theta = Tensor::from_f64(&[5], &[0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum_all(sq)
            },
            &[theta],
            1e-4,
            64,
            StreamKey::root(0),
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 5);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
