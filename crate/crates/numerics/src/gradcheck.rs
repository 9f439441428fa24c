//! Central-difference verification of tape gradients.
//!
//! The loss is evaluated once on a fresh tape to record the values of every
//! `stop_grad` node. Each perturbed evaluation then replays those values, so
//! a frozen branch stays frozen at the unperturbed point and the numerical
//! derivative measures exactly what the tape differentiates. For
//! `f(w) = sg(w)·w` this yields `sg(w)`, not `2w`.
//!
//! A parameter that the loss reads but that receives no tape gradient (every
//! path to it passes through `stop_grad`) is reported as
//! [`CheckStatus::ZeroByStopGrad`]; its numerical derivative must then vanish.

use crate::error::{NumericsError, Result};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub scale_floor: f64,
    /// Check at most this many evenly strided elements per parameter.
    pub max_elements_per_param: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, scale_floor: 1e-6, max_elements_per_param: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    ZeroByStopGrad,
    Unused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.status != CheckStatus::Fail)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.status == CheckStatus::Fail)
    }
}

/// Compares tape gradients of `loss_fn` against central finite differences
/// for every parameter in `store` (name order).
pub fn finite_diff_check<F>(loss_fn: F, store: &ParamStore<f64>, opts: CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let f0 = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let frozen = tape.frozen_values().to_vec();

    let mut again = Tape::new();
    let l2 = loss_fn(&mut again, store)?;
    let f1 = again.scalar(l2);
    if f0.to_bits() != f1.to_bits() {
        return Err(NumericsError::NonDeterministic(f0, f1));
    }

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::replaying(frozen.clone());
        let l = loss_fn(&mut t, s)?;
        Ok(t.scalar(l))
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name)?.len();
        let read = tape_reads(&tape, &name);
        let analytic = grads.get(&name);
        let indices: Vec<usize> = match opts.max_elements_per_param {
            Some(k) if k < n => {
                let stride = n.div_ceil(k);
                (0..n).step_by(stride).collect()
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            status: CheckStatus::Pass,
        };
        if !read {
            check.status = CheckStatus::Unused;
            check.checked = 0;
            params.push(check);
            continue;
        }
        for &i in &indices {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + opts.epsilon;
            let fp = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - opts.epsilon;
            let fm = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.epsilon);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.scale_floor);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        check.status = if check.max_rel_error > opts.tolerance {
            CheckStatus::Fail
        } else if analytic.is_none() {
            CheckStatus::ZeroByStopGrad
        } else {
            CheckStatus::Pass
        };
        params.push(check);
    }
    Ok(GradCheckReport { loss: f0, tolerance: opts.tolerance, params })
}

fn tape_reads(tape: &Tape<f64>, name: &str) -> bool {
    tape.param_names().any(|n| n == name)
}
