//! Central finite-difference check of analytic parameter gradients.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::Result;

/// Outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Parameter entry where it occurred, as `name[index]`.
    pub worst: String,
    /// Analytic and numeric values at `worst`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Compares the gradients returned by `eval` against central differences
/// with step `h` for every entry of every parameter whose name starts with
/// `prefix`. Gradients missing from the map count as zero.
pub fn check_params(
    params: &ParamStore,
    prefix: &str,
    h: f64,
    floor: f64,
    eval: impl Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
) -> Result<GradReport> {
    let (_, grads) = eval(params)?;
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let names: Vec<String> = params.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    let mut probe = params.clone();
    for name in names {
        let len = params.get(&name).expect("listed name").len();
        for i in 0..len {
            let orig = params.get(&name).expect("listed name").data()[i];
            probe.get_mut(&name).expect("listed name").data_mut()[i] = orig + h;
            let plus = eval(&probe)?.0;
            probe.get_mut(&name).expect("listed name").data_mut()[i] = orig - h;
            let minus = eval(&probe)?.0;
            probe.get_mut(&name).expect("listed name").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}]");
                report.worst_pair = (analytic, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
