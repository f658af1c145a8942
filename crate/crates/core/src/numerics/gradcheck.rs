//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// so gradients near zero are compared in absolute terms.
    pub floor: f64,
    /// Cap on perturbed entries per parameter; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn eval<F>(f: &F, params: &Params) -> Result<f64>
where
    F: Fn(&mut Tape, &Params) -> Result<Var>,
{
    let mut tape = Tape::detached();
    let root = f(&mut tape, params)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::contract("grad_check closure must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar returned by `f` against central
/// differences with step `h` for every trainable parameter.
pub fn grad_check<F>(f: F, params: &Params, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Params) -> Result<Var>,
{
    let base = eval(&f, params)?;
    let again = eval(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(format!(
            "closure is not deterministic: {base} vs {again}"
        )));
    }

    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let grads = tape.backward(root, params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        entries_checked: 0,
        max_rel_err: 0.0,
        tol: opts.tol,
        pass: true,
    };

    for (name, value) in params.trainable() {
        let analytic = grads.param(name).expect("backward fills every trainable");
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < value.len() => {
                let mut idx = sample(&mut rng, value.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..value.len()).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            entries_checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in entries {
            let orig = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.h;
            let plus = eval(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.h;
            let minus = eval(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        report.entries_checked += check.entries_checked;
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    report.pass = report.max_rel_err < opts.tol;
    Ok(report)
}
