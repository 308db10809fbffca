//! Central-difference gradient oracle.

use crate::error::{arg, Error, Result};

use super::param::ParamStore;
use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tol)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Multiplies the analytic gradient of the named parameter before the
    /// comparison. Negative control for the checker itself.
    pub corrupt: Option<(String, f64)>,
    /// Fourth-order stencil `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`
    /// instead of the central difference.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            corrupt: None,
            five_point: false,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    grad_check_with(
        store,
        f,
        &GradCheckOptions {
            eps,
            tol,
            corrupt: None,
            five_point: false,
        },
    )
}

/// Compares the tape's gradient of `f` with finite differences for every
/// coordinate of every parameter in `store`. Values are restored afterwards.
pub fn grad_check_with<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    if !(opts.eps > 0.0) {
        return arg(format!("grad_check eps must be positive, got {}", opts.eps));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let (tape, loss) = f(s)?;
        tape.value(loss).item()
    };
    let (tape, loss) = f(store)?;
    let base = tape.value(loss).item()?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism {
            first: base,
            second: again,
        });
    }
    let grads = tape.gradients(loss, store.len())?;
    drop(tape);

    let mut report = GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        params: Vec::with_capacity(store.len()),
    };
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        let mut factor = 1.0;
        if let Some((target, s)) = &opts.corrupt {
            if *target == name {
                factor = *s;
            }
        }
        let n = store.value(id).len();
        let mut check = ParamCheck {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]) * factor;
            let orig = store.value(id).data()[i];
            let mut at = |delta: f64| {
                store.value_mut(id).data_mut()[i] = orig + delta;
                let v = eval(store);
                store.value_mut(id).data_mut()[i] = orig;
                v
            };
            let e = opts.eps;
            let numeric = if opts.five_point {
                (8.0 * (at(e)? - at(-e)?) - (at(2.0 * e)? - at(-2.0 * e)?)) / (12.0 * e)
            } else {
                (at(e)? - at(-e)?) / (2.0 * e)
            };
            let rel = relative_error(analytic, numeric);
            if rel > check.max_rel_err || i == 0 {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
