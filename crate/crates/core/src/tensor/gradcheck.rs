use super::{Graph, Tensor, TensorError, Var};

/// Outcome for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `max_j |analytic_j - numeric_j| / max(‖analytic‖∞, ‖numeric‖∞, floor)`.
    /// `None` when the tensor was skipped (requires_grad = false).
    pub max_rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.checks
            .iter()
            .filter_map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.checks
            .iter()
            .filter(|c| c.max_rel_error.is_some_and(|e| e > self.tolerance))
    }
}

/// Gradients whose magnitude stays under this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh graph and one leaf per input (in order) and must
/// return a scalar. It is called `1 + 2·n` times where `n` counts the
/// checked elements, so keep inputs small. Errors from `f` pass through
/// unchanged.
pub fn grad_check<F, E>(
    inputs: &[(String, Tensor, bool)],
    f: F,
    step: f64,
    tolerance: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        }
        .into());
    }
    let eval = |vals: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(inputs)
            .map(|(t, (_, _, rg))| g.leaf(t.clone(), *rg))
            .collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("function value {v}")).into());
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t, rg)| g.leaf(t.clone(), *rg)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut vals: Vec<Tensor> = inputs.iter().map(|(_, t, _)| t.clone()).collect();
    let mut checks = Vec::with_capacity(inputs.len());
    for (k, (name, t, rg)) in inputs.iter().enumerate() {
        if !rg {
            checks.push(TensorCheck {
                name: name.clone(),
                max_rel_error: None,
            });
            continue;
        }
        let analytic = g
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        if !analytic.all_finite() {
            return Err(TensorError::NonFinite(format!("analytic gradient of {name}")).into());
        }
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let orig = t.data()[j];
            vals[k].data_mut()[j] = orig + step;
            let up = eval(&vals)?;
            vals[k].data_mut()[j] = orig - step;
            let down = eval(&vals)?;
            vals[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(GRAD_FLOOR, |m, x| m.max(x.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        checks.push(TensorCheck {
            name: name.clone(),
            max_rel_error: Some(diff / scale),
        });
    }
    Ok(GradCheckReport { tolerance, checks })
}
