//! Central finite-difference verification of analytic gradients.

use super::params::ParamStore;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that elements whose
    /// true gradient is ~0 are judged by absolute error.
    pub denominator_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub elements_checked: usize,
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

impl CheckReport {
    pub fn summary(&self) -> String {
        let worst = match &self.worst {
            Some((name, i)) => format!(" worst={name}[{i}]"),
            None => String::new(),
        };
        format!(
            "{} {} elements={} max_rel_err={:.3e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elements_checked,
            self.max_relative_error,
            worst
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Checks the tape's gradients of `model_fn` against central differences.
///
/// `model_fn` builds a scalar on a fresh tape bound to the store; it must be
/// deterministic, which is verified by evaluating it twice.
pub fn finite_diff_check<F>(
    name: &str,
    store: &mut ParamStore,
    model_fn: F,
    cfg: GradCheckConfig,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let out = model_fn(&mut tape)?;
        tape.backward(out)?
    };
    check_against(name, store, model_fn, &analytic, cfg)
}

/// Like [`finite_diff_check`] with externally supplied analytic gradients.
pub fn check_against<F>(
    name: &str,
    store: &mut ParamStore,
    model_fn: F,
    analytic: &Gradients,
    cfg: GradCheckConfig,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if cfg.epsilon.is_nan() || cfg.epsilon <= 0.0 {
        return Err(Error::Harness(format!(
            "epsilon must be positive, got {}",
            cfg.epsilon
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = model_fn(&mut tape)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Harness("model function must return a scalar".into()));
        }
        Ok(tape.scalar(out))
    };
    let a = eval(store)?;
    let b = eval(store)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Harness(format!(
            "model function is not deterministic ({a} vs {b}); disable dropout"
        )));
    }

    let mut max_err = 0.0_f64;
    let mut worst = None;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let grad = analytic.get(id);
        let n = store.value(id).len();
        for i in 0..n {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + cfg.epsilon;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = original - cfg.epsilon;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.epsilon);
            let err = relative_error(grad.data()[i], numeric, cfg.denominator_floor);
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((store.get(id).name().to_string(), i));
            }
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        elements_checked: checked,
        max_relative_error: max_err,
        worst,
        passed: max_err < cfg.tolerance,
    })
}
