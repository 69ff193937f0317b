//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::ops::NormMode;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates (sampled deterministically).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions {
            tolerance,
            ..Default::default()
        }
    }

    pub fn sampled(mut self, max_coords: usize) -> Self {
        self.max_coords = Some(max_coords);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative error with a floor tied to the overall gradient scale, so that
/// coordinates whose true gradient is (near) zero are compared absolutely
/// against that scale instead of against rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of `sum(f(x))` with central differences.
pub fn grad_check<F>(f: F, input: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let out = f(&tape.constant(x.clone()))?;
        let v = out.value().sum();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: "grad_check objective".into(),
                index: 0,
            });
        }
        Ok(v)
    };

    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = f(&x)?.sum()?;
    let grads = tape.backward(&out)?;
    let analytic = grads
        .get(&x)
        .unwrap_or_else(|| Tensor::zeros(input.shape()));
    if let Some(index) = analytic.first_non_finite() {
        return Err(Error::NonFinite {
            location: "analytic gradient".into(),
            index,
        });
    }

    let mut probe = input.clone();
    compare(analytic.data(), opts, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let v = eval(&probe);
        probe.data_mut()[i] = orig;
        v
    })
}

/// Check sampled coordinates of `analytic` against central differences of
/// `eval_shifted(i, delta)`, the objective with coordinate `i` moved by `delta`.
fn compare(
    analytic: &[f64],
    opts: &GradCheckOptions,
    mut eval_shifted: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let n = analytic.len();
    let coords: Vec<usize> = match opts.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut c = sample(&mut rng, n, m).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..n).collect(),
    };
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        tolerance: opts.tolerance,
    };
    for &i in &coords {
        let plus = eval_shifted(i, opts.step)?;
        let minus = eval_shifted(i, -opts.step)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i];
        let err = relative_error(a, numeric, floor);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Gradient check over every parameter of `store` (flattened in store
/// order) for the objective `sum(f(params))`, with norms in `mode`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    mode: NormMode,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Bound<'t, 's>) -> Result<Var<'t>>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let v = f(&s.bind(&tape, mode))?.value().sum();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                location: "grad_check objective".into(),
                index: 0,
            });
        }
        Ok(v)
    };
    let tape = Tape::new();
    let bound = store.bind(&tape, mode);
    let out = f(&bound)?.sum()?;
    let grads = bound.collect_grads(tape.backward(&out)?);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut offsets = Vec::with_capacity(ids.len());
    let mut analytic = Vec::with_capacity(store.num_scalars());
    for (id, g) in ids.iter().zip(grads) {
        offsets.push(analytic.len());
        let n = store.get(*id).numel();
        analytic.extend(g.unwrap_or_else(|| vec![0.0; n]));
    }
    if let Some(index) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "analytic parameter gradient".into(),
            index,
        });
    }
    let mut probe = store.clone();
    compare(&analytic, opts, |i, delta| {
        let k = offsets.partition_point(|&o| o <= i) - 1;
        let j = i - offsets[k];
        let orig = probe.get(ids[k]).data()[j];
        probe.get_mut(ids[k]).data_mut()[j] = orig + delta;
        let v = eval(&probe);
        probe.get_mut(ids[k]).data_mut()[j] = orig;
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let opts = GradCheckOptions::with_tolerance(1e-8);
        let report = grad_check(|v| v.mul(v), &x, &opts).unwrap();
        assert!(report.passed(), "{report:?}");

        let tape = Tape::new();
        let v = tape.leaf(x);
        let y = v.mul(&v).unwrap().sum().unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report =
            grad_check(|v| v.abs_sum(), &x, &GradCheckOptions::with_tolerance(1e-6)).unwrap();
        assert!(report.passed());
        let x = Tensor::new(vec![1], vec![1e-6]).unwrap();
        let report = grad_check(|v| v.abs_sum(), &x, &GradCheckOptions::default()).unwrap();
        // |x| has its kink inside the stencil: analytic 1 vs numeric 0.1.
        assert!(!report.passed(), "{report:?}");
    }
}
