use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, ParamClass, ParamStore, Result, Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Coordinates checked per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub class: ParamClass,
    pub coords: usize,
    /// Size of the tensor; every coordinate is checked when it is small.
    pub numel: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` at the worst coordinate.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst error among parameters of one class, if any were checked.
    pub fn max_for_class(&self, class: ParamClass) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.class == class)
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

/// Compares backward-pass gradients with central differences.
///
/// `loss_fn` records the loss for the given parameter values on a fresh tape.
/// Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(store: &mut ParamStore<T>, mut loss_fn: F, opts: &FdOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<(Tape<T>, Var)>,
{
    if !(opts.eps > 0.0 && opts.eps <= 0.1) {
        return Err(AutodiffError::InvalidStep(opts.eps));
    }
    if store.is_empty() {
        return Ok(GradCheckReport::default());
    }

    store.zero_grads();
    let (tape, loss) = loss_fn(store)?;
    let base = tape.scalar(loss);
    tape.backward(loss, store)?;
    drop(tape);

    let (again, loss) = loss_fn(store)?;
    let repeat = again.scalar(loss);
    if base.to_bits() != repeat.to_bits() {
        return Err(AutodiffError::NonDeterministic {
            first: base,
            second: repeat,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let picks: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel = 0.0f64;
        for &i in &picks {
            let analytic = store.grad(id).data()[i].widen();
            let orig = store.value(id).data()[i];
            let plus = T::narrow(orig.widen() + opts.eps);
            let minus = T::narrow(orig.widen() - opts.eps);

            store.value_data_mut(id)[i] = plus;
            let (t, l) = loss_fn(store)?;
            let f_plus = t.scalar(l);
            store.value_data_mut(id)[i] = minus;
            let (t, l) = loss_fn(store)?;
            let f_minus = t.scalar(l);
            store.value_data_mut(id)[i] = orig;

            // Divide by the step actually taken after rounding to `T`.
            let numeric = (f_plus - f_minus) / (plus.widen() - minus.widen());
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = (i, analytic, numeric);
            }
        }
        let slot = store.slot(id);
        report.params.push(ParamCheck {
            name: slot.name().to_string(),
            class: slot.class(),
            coords: picks.len(),
            numel: n,
            max_rel_error: max_rel,
            worst,
        });
    }
    Ok(report)
}
