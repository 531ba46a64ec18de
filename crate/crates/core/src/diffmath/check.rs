use super::{DiffError, Graph, ParamId, ParamStore, Var};

/// Result of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over all checked entries.
    pub max_rel_error: f64,
    /// Same quantity per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

/// Checks every entry of every parameter in `store`.
pub fn finite_diff_check<F>(store: &ParamStore, epsilon: f64, f: F) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_params(store, &ids, epsilon, f)
}

/// Checks only the listed parameters. `f` rebuilds the scalar objective on a
/// fresh graph; it must be a pure function of the store values.
pub fn finite_diff_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    epsilon: f64,
    f: F,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(DiffError::InvalidEpsilon(epsilon));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let shape = g.value(loss).shape().to_vec();
        if !g.value(loss).is_scalar() {
            return Err(DiffError::NotScalar { shape });
        }
        g.backward(loss)?
    };

    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::with_capacity(ids.len()),
        entries_checked: 0,
    };
    for &id in ids {
        let mut worst = 0.0f64;
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
            report.entries_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}
