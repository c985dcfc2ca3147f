//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-3,
            max_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences. `f` records its computation on the tape it is given, using
/// the supplied input handles.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::Shape {
                op: "check_gradients",
                lhs: value.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(value.data()[0])
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (t, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = grads.get(vars[t]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_per_input {
            Some(limit) if limit < n => {
                let mut c = sample(&mut rng, n, limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for e in coords {
            let orig = input.data()[e];
            work[t].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[t].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[t].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[e], numeric, opts.floor);
            if !err.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at input {t}, element {e}"
                )));
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
