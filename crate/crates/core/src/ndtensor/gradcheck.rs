use super::{Params, Result, Tape, TensorId};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    /// Coordinate where the maximum occurred, as `name[index]`.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs())
}

/// Check the gradient of a scalar function of one input tensor against
/// central differences at every coordinate. `f` must build the same graph
/// on every call; checks run in f64 regardless of the training precision.
pub fn grad_check<F>(shape: &[usize], x0: &[f64], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(shape, data.to_vec(), false)?;
        let loss = f(&mut tape, x)?;
        tape.scalar_value(loss)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(shape, x0.to_vec(), true)?;
    let loss = f(&mut tape, x)?;
    tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x0.len()],
    };
    let mut report = GradCheckReport {
        checked: x0.len(),
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        probe[i] = x0[i] + eps;
        let up = eval(&probe)?;
        probe[i] = x0[i] - eps;
        let down = eval(&probe)?;
        probe[i] = x0[i];
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric);
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("x[{i}]");
        }
    }
    Ok(report)
}

/// Check analytic gradients of every parameter coordinate against central
/// differences. `f` builds the loss from the given store, leasing whatever
/// parameters it uses; coordinates outside the graph must have zero
/// analytic gradient and zero numeric difference.
pub fn grad_check_params<F>(params: &Params<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Params<f64>) -> Result<TensorId>,
{
    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        tape.scalar_value(loss)
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.collect_param_grads(&grads);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut probe = params.clone();
    for (name, p) in params.iter() {
        for i in 0..p.data.len() {
            let a = analytic
                .get(name)
                .and_then(|(_, g)| g.get(i).copied())
                .unwrap_or(0.0);
            probe.get_mut(name)?.data[i] = p.data[i] + eps;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data[i] = p.data[i] - eps;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data[i] = p.data[i];
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
