//! Central finite-difference verification of analytic gradients.
//!
//! Every backward pass in this crate is hand-written, so this checker is the
//! ground truth the rest of the numerical code is tested against.

use super::tensor::ParamVisitor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative disagreement observed across all parameters.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the worst disagreement occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar parameters checked.
    pub checked: usize,
    pub pass: bool,
}

/// Relative disagreement with a floor on the denominator: elements whose
/// gradient is orders of magnitude below the typical (RMS) gradient carry
/// cancellation noise from the finite differences, so they are compared
/// against the floor instead of their own magnitude.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(floor);
    (a - n).abs() / denom
}

/// Compares the analytic gradient left in each `Param::grad` by `loss_fn`
/// against central finite differences of the loss.
///
/// `loss_fn` must be deterministic: it is invoked once for the analytic
/// gradients and twice per scalar parameter for the numeric ones.
pub fn finite_difference_check<M, F>(
    model: &mut M,
    mut loss_fn: F,
    eps: f64,
    tol: f64,
) -> GradCheckReport
where
    M: ParamVisitor,
    F: FnMut(&mut M) -> f64,
{
    model.zero_grads();
    let _ = loss_fn(model);

    // Snapshot the analytic gradients; the perturbed evaluations below will
    // overwrite them.
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.for_each_param(&mut |name, p| {
        analytic.push((name.to_string(), p.grad.data().to_vec()));
    });

    let (sum_sq, n_total) = analytic
        .iter()
        .flat_map(|(_, g)| g.iter())
        .fold((0.0, 0usize), |(s, n), g| (s + g * g, n + 1));
    let rms = if n_total > 0 { (sum_sq / n_total as f64).sqrt() } else { 0.0 };
    let floor = (1e-3 * rms).max(1e-8);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, pass: true };

    for slot in 0..analytic.len() {
        let n_scalars = analytic[slot].1.len();
        for i in 0..n_scalars {
            let nudge = |model: &mut M, delta: f64| {
                let mut k = 0;
                model.for_each_param(&mut |_, p| {
                    if k == slot {
                        p.value.data_mut()[i] += delta;
                    }
                    k += 1;
                });
            };
            nudge(model, eps);
            model.zero_grads();
            let plus = loss_fn(model);
            nudge(model, -2.0 * eps);
            model.zero_grads();
            let minus = loss_fn(model);
            nudge(model, eps);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot].1[i];
            let e = rel_err(a, numeric, floor);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((analytic[slot].0.clone(), i));
            }
            report.checked += 1;
        }
    }

    report.pass = report.max_rel_err <= tol;
    report
}
