//! Central finite-difference checks for graph-built scalar functions.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_rel_error: f64,
    /// Largest absolute elementwise difference.
    pub max_abs_error: f64,
    /// Input with the worst relative error.
    pub worst_input: usize,
    /// Number of scalar coordinates probed.
    pub probes: usize,
}

/// Differentiate `build` with respect to every entry of every input and
/// compare against central differences of step `eps`.
pub fn check_param_grads<F>(inputs: &[Tensor], eps: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let probes: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_subset(inputs, &probes, eps, build)
}

/// Like [`check_param_grads`] but only probes the listed flat coordinates of
/// each input. The relative error is taken over the probed coordinates.
pub fn check_subset<F>(inputs: &[Tensor], probes: &[Vec<usize>], eps: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = analytic_grads(inputs, &build);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_input: 0,
        probes: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, coords) in probes.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &c in coords {
            let orig = work[k].data()[c];
            work[k].data_mut()[c] = orig + eps;
            let plus = evaluate(&work, &build);
            work[k].data_mut()[c] = orig - eps;
            let minus = evaluate(&work, &build);
            work[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[c];
            let d = a - numeric;
            report.max_abs_error = report.max_abs_error.max(d.abs());
            diff2 += d * d;
            a2 += a * a;
            n2 += numeric * numeric;
            report.probes += 1;
        }
        let scale = crate::math::sqrt(a2.max(n2));
        let rel = if scale > 0.0 { crate::math::sqrt(diff2) / scale } else { 0.0 };
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_input = k;
        }
    }
    report
}

/// Analytic gradient of `build` with respect to each input.
pub fn analytic_grads<F>(inputs: &[Tensor], build: &F) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars);
    g.backward(root);
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect()
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = build(&mut g, &vars);
    g.value(root).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_central_difference() {
        let x = Tensor::row_vector(alloc::vec![1.0, -2.0, 0.5]);
        let report = check_param_grads(&[x], 1e-4, |g, v| {
            let sq = g.mul(v[0], v[0]);
            g.sum(sq)
        });
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.probes, 3);
    }
}
