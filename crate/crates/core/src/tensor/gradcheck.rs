//! Central-difference gradient verification.

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Reads};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Elements the loss never reads. Their difference quotient is exactly
    /// zero, so they are compared against zero without evaluating `f`.
    pub unread: usize,
}

/// Compares analytic gradients already stored in `params` against central
/// differences of `f`, over every element of every trainable parameter.
///
/// The relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(params: &mut ParamStore<f64>, mut f: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    run(params, eps, |s, _| f(s), |_, _| true)
}

/// Like [`finite_diff_check`], for a loss that reports which parameter rows
/// it read. Every perturbed evaluation must read exactly the rows of the
/// unperturbed one.
pub fn finite_diff_check_reads<F>(params: &mut ParamStore<f64>, mut f: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Reads)>,
{
    let (_, base) = f(params)?;
    let touched = base.clone();
    run(
        params,
        eps,
        |s, name| {
            let (v, reads) = f(s)?;
            if reads != base {
                return Err(Error::Config(format!("perturbing {name} changed which parameters the loss reads")));
            }
            Ok(v)
        },
        move |id, row| touched.touches(id, row),
    )
}

fn run<F, R>(params: &mut ParamStore<f64>, eps: f64, mut f: F, read: R) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &str) -> Result<f64>,
    R: Fn(ParamId, usize) -> bool,
{
    let ids: Vec<ParamId> = params.trainable_ids();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        unread: 0,
    };
    for id in ids {
        let n = params.get(id).tensor.numel();
        let cols = params.get(id).tensor.cols();
        for i in 0..n {
            let numeric = if read(id, i / cols) {
                let name = params.get(id).name.clone();
                let orig = params.get(id).tensor.data()[i];
                params.get_mut(id).tensor.data_mut()[i] = orig + eps;
                let plus = f(params, &name)?;
                params.get_mut(id).tensor.data_mut()[i] = orig - eps;
                let minus = f(params, &name)?;
                params.get_mut(id).tensor.data_mut()[i] = orig;
                (plus - minus) / (2.0 * eps)
            } else {
                report.unread += 1;
                0.0
            };
            let analytic = params.get(id).grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
