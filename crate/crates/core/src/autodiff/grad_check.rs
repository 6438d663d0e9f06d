use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.item(out))
}

/// Maximum relative error between the analytic gradient of `f` and a
/// central difference with step `h`, over every coordinate of `params`.
///
/// Relative error per coordinate is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_report(f, params, h).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::domain(
            "grad_check",
            format!("step {h} must be positive"),
        ));
    }
    for (pi, p) in params.iter().enumerate() {
        if let Some(index) = p.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { param: pi, index });
        }
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let out = f(&mut g, &vars)?;
    if !g.item(out).is_finite() {
        return Err(Error::NonFinite { param: 0, index: 0 });
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    for pi in 0..params.len() {
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + h;
            let plus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[i] = orig - h;
            let minus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    param: pi,
                    index: i,
                });
            }
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, i);
            }
        }
    }
    Ok(report)
}
