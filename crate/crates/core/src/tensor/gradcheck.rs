//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub eps: f64,
    /// Multiplier applied to analytic gradients before comparison. Anything
    /// other than 1.0 is fault injection.
    pub analytic_scale: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            seed: 0,
            eps: 1e-6,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub coordinates_checked: usize,
}

/// `|a - n| / (|a| + |n| + eps)`
pub fn relative_error(analytic: f64, numeric: f64, eps: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + eps)
}

/// Compare the tape's gradient of `f` against central differences.
///
/// `f` must be deterministic: it is re-evaluated on a fresh tape for every
/// perturbed coordinate.
pub fn finite_diff_check<F, E>(f: F, inputs: &[Tensor], opts: &FdOptions) -> std::result::Result<FdReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, inputs[k].shape());
        let n = inputs[k].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(limit) if limit < n => sample(&mut rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = work[k].data()[c];
            work[k].data_mut()[c] = orig + opts.h;
            let plus = eval(&work)?;
            work[k].data_mut()[c] = orig - opts.h;
            let minus = eval(&work)?;
            work[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[c] * opts.analytic_scale;
            worst = worst.max(relative_error(a, numeric, opts.eps));
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(FdReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        coordinates_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.scale(sq, 1.5);
                Ok::<_, TensorError>(t.sum(s))
            },
            &[x],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates_checked, 3);
    }

    #[test]
    fn fault_injection_is_detected() {
        let x = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
        let opts = FdOptions {
            analytic_scale: 1.1,
            ..FdOptions::default()
        };
        let report = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok::<_, TensorError>(t.sum(sq))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }
}
