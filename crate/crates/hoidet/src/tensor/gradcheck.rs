//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, Real, Result, Tensor, TensorId};

/// Outcome of one [`finite_diff_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error across every input element.
    pub max_rel_err: Real,
    /// Input index and flat element index where the maximum occurred.
    pub worst: (usize, usize),
}

impl GradCheck {
    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` must build the same scalar-valued computation each time it is called;
/// it receives the inputs already registered on a fresh graph. Each input
/// element is perturbed by `±h` and the numeric slope `(f⁺ − f⁻) / 2h` is
/// compared to the backward-pass gradient with the relative error
/// `|a − n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F>(inputs: &[Tensor], h: Real, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor]| -> Result<Real> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut max_rel_err: Real = 0.0;
    let mut worst = (0, 0);
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[which]);
        for elem in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[elem]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (which, elem);
            }
        }
    }
    Ok(GradCheck { max_rel_err, worst })
}
