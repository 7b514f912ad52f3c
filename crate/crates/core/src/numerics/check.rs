//! Central finite-difference gradient checker.

use super::{Gradients, NumericsError, Parameterized};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// Parameter holding the largest error, if any parameter was checked.
    pub worst_param: Option<String>,
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(w+eps) - f(w-eps)) / 2eps` for every parameter entry.
///
/// The error per entry is `|analytic - numeric| / max(1, |analytic|)`; the
/// report carries the maximum per parameter and overall. Parameters
/// absent from the analytic gradients are treated as having zero gradient.
pub fn grad_check<P, F>(params: &mut P, eps: f64, mut f: F) -> Result<GradCheckReport, NumericsError>
where
    P: Parameterized<f64>,
    F: FnMut(&P) -> Result<(f64, Gradients<f64>), NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite {
            param: "<loss>".into(),
        });
    }

    let mut shapes = Vec::new();
    params.visit_params(&mut |name, t| shapes.push((name.to_string(), t.len())));

    let mut report = GradCheckReport {
        params: Vec::with_capacity(shapes.len()),
        max_rel_error: 0.0,
        worst_param: None,
    };
    for (name, len) in shapes {
        let grad = analytic.get(&name);
        if let Some(g) = grad {
            g.check_finite(&name)?;
        }
        let mut worst = 0.0f64;
        for i in 0..len {
            let original = read_entry(params, &name, i);
            write_entry(params, &name, i, original + eps);
            let plus = f(params)?.0;
            write_entry(params, &name, i, original - eps);
            let minus = f(params)?.0;
            write_entry(params, &name, i, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFinite { param: name });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
        if worst > report.max_rel_error || report.worst_param.is_none() {
            report.max_rel_error = report.max_rel_error.max(worst);
            report.worst_param = Some(name.clone());
        }
        report.params.push(ParamCheck {
            name,
            entries: len,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

fn read_entry<P: Parameterized<f64>>(params: &mut P, name: &str, i: usize) -> f64 {
    let mut v = 0.0;
    params.with_param_mut(name, &mut |t| v = t.data()[i]);
    v
}

fn write_entry<P: Parameterized<f64>>(params: &mut P, name: &str, i: usize, v: f64) {
    params.with_param_mut(name, &mut |t| t.data_mut()[i] = v);
}
