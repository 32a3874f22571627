//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Finite-difference step δ.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator. Keeps elements whose
    /// true gradient is ~0 from being judged on round-off alone.
    pub abs_floor: f64,
    /// Check only this many randomly chosen elements of each input.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tol: 1e-6,
            abs_floor: 1e-6,
            max_elements_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<ElementCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&ElementCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "gradcheck function must be scalar-valued, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of scalar `f` with `(f(x+δ) − f(x−δ)) / 2δ`
/// for every (or a seeded sample of every) input element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut targets = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        match opts.max_elements_per_input {
            Some(cap) if cap < t.len() => {
                let mut rng = stream(opts.seed, Purpose::Probe, &[i as u64]);
                let mut idx = sample(&mut rng, t.len(), cap).into_vec();
                idx.sort_unstable();
                targets.extend(idx.into_iter().map(|j| (i, j)));
            }
            _ => targets.extend((0..t.len()).map(|j| (i, j))),
        }
    }

    let results = parallel::map_range(targets.len(), |n| -> Result<ElementCheck> {
        let (i, j) = targets[n];
        let mut shifted = inputs.to_vec();
        let x0 = inputs[i].data()[j];
        shifted[i].data_mut()[j] = x0 + opts.step;
        let plus = evaluate(&f, &shifted)?;
        shifted[i].data_mut()[j] = x0 - opts.step;
        let minus = evaluate(&f, &shifted)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i].data()[j];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        Ok(ElementCheck {
            input: i,
            index: j,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
        })
    });
    let checks = results.into_iter().collect::<Result<Vec<_>>>()?;
    let max_rel_error = checks.iter().fold(0.0_f64, |m, c| m.max(c.rel_error));
    Ok(GradcheckReport {
        passed: max_rel_error < opts.tol && checks.iter().all(|c| c.rel_error.is_finite()),
        max_rel_error,
        tol: opts.tol,
        checks,
    })
}
