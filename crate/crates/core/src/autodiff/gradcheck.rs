use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing backward against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    /// (input, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every entry
/// of every input.
///
/// Stop-gradient values are captured at the unperturbed point and replayed
/// in every perturbed evaluation, so the numeric derivative treats them as
/// constants exactly as backward does.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    check_gradients_with(f, inputs, step, Execution::default(), |_, _| {})
}

/// As [`check_gradients`], with an explicit execution mode and a hook that may
/// rewrite the analytic gradients before comparison (used for negative
/// controls).
pub fn check_gradients_with<F, H>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    exec: Execution,
    tamper: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
    H: Fn(usize, &mut Tensor),
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Domain {
            op: "check_gradients",
            detail: format!("step must be positive, got {step}"),
        });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).clone();
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .enumerate()
        .map(|(i, (&v, t))| {
            let mut grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            tamper(i, &mut grad);
            grad
        })
        .collect();
    let detached = g.into_detached_values();

    let again = eval_at(&f, inputs, None, &detached)?;
    let fresh = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };
    if again.to_bits() != base.item().to_bits() || fresh.to_bits() != base.item().to_bits() {
        return Err(Error::NonDeterministic);
    }

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();

    let numeric: Vec<Result<f64>> = exec.map(&coords, |&(i, j)| {
        let plus = eval_at(&f, inputs, Some((i, j, step)), &detached)?;
        let minus = eval_at(&f, inputs, Some((i, j, -step)), &detached)?;
        Ok((plus - minus) / (2.0 * step))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: None,
        evaluations: 2 * coords.len(),
    };
    for (&(i, j), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[i].data()[j];
        let err = relative_error(a, n);
        if !err.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient comparison at input {i} index {j}: analytic {a}, numeric {n}"
            )));
        }
        report.per_input[i] = report.per_input[i].max(err);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, j, a, n));
        }
    }
    Ok(report)
}

fn eval_at<F>(f: &F, inputs: &[Tensor], perturb: Option<(usize, usize, f64)>, detached: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_detached(detached.to_vec());
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| match perturb {
            Some((pi, j, h)) if pi == i => {
                let mut t = t.clone();
                t.data_mut()[j] += h;
                g.constant(t)
            }
            _ => g.constant(t.clone()),
        })
        .collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}
