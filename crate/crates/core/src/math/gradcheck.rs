use super::{Grads, MathError, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)`
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients against central differences with step `h`
/// for every entry of the selected parameters (all when `only` is `None`).
pub fn grad_check<F>(
    params: &ParamStore,
    analytic: &Grads,
    loss: F,
    h: f64,
    only: Option<&[ParamId]>,
) -> Result<GradCheckReport, MathError>
where
    F: Fn(&ParamStore) -> f64,
{
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => (0..params.len()).collect(),
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in ids {
        let dense = analytic.dense(id, params);
        for idx in 0..params.get(id).data().len() {
            let orig = params.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + h;
            let up = loss(&work);
            work.get_mut(id).data_mut()[idx] = orig - h;
            let down = loss(&work);
            work.get_mut(id).data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(MathError::NonFinite {
                    param: params.name(id).to_string(),
                    index: idx,
                });
            }
            let numeric = (up - down) / (2.0 * h);
            let err = (dense.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// Plain-vector variant: `f` is the scalar function, `grad` its analytic
/// gradient at `x`.
pub fn grad_check_fn<F>(f: F, grad: &[f64], x: &[f64], h: f64) -> Result<f64, MathError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        work[i] = x[i] + h;
        let up = f(&work);
        work[i] = x[i] - h;
        let down = f(&work);
        work[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(MathError::NonFinite {
                param: "x".into(),
                index: i,
            });
        }
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((grad[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
