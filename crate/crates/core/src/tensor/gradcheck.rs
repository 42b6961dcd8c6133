use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of [`finite_diff_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport<T> {
    /// Worst relative error over the compared elements.
    pub max_rel_error: T,
    pub checked: usize,
    /// Elements whose ±step stencil straddled a ReLU kink or max-pool tie
    /// and were compared with a smaller step that stays on one smooth piece.
    pub refined: usize,
    /// Elements sitting on a kink even at the smallest step tried.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `f` at `x` against central differences.
///
/// Returns the maximum over elements of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Multi-input variant of [`finite_diff_check`]: every element of every
/// input is perturbed in turn.
pub fn finite_diff_check_many<T, F>(f: F, xs: &[Tensor<T>], step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check(f, xs, step, false).map(|r| r.max_rel_error)
}

/// Like [`finite_diff_check_many`], but aware of non-smooth points: when the
/// ±step stencil changes a piecewise branch (see [`Tape::branch_signature`])
/// the element is retried with step/100 and step/10⁴, and only skipped if
/// every stencil crosses a kink.
pub fn finite_diff_report<T, F>(f: F, xs: &[Tensor<T>], step: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check(f, xs, step, true)
}

fn check<T, F>(f: F, xs: &[Tensor<T>], step: T, skip_kinks: bool) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base = tape.branch_signature();

    let eval = |inputs: &[Tensor<T>]| -> Result<(T, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad(false))).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item().unwrap_or_else(T::nan), tape.branch_signature()))
    };

    let two = T::one() + T::one();
    let hundredth = T::from_f64_lossy(0.01);
    let mut report = GradCheckReport { max_rel_error: T::zero(), checked: 0, refined: 0, skipped: 0 };
    let mut work: Vec<Tensor<T>> = xs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![T::zero(); xs[which].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = xs[which].data()[i];
            let mut h = step;
            let mut numeric = None;
            for attempt in 0..3 {
                work[which].data_mut()[i] = orig + h;
                let (up, sig_up) = eval(&work)?;
                work[which].data_mut()[i] = orig - h;
                let (down, sig_down) = eval(&work)?;
                work[which].data_mut()[i] = orig;
                if !skip_kinks || (sig_up == base && sig_down == base) {
                    numeric = Some(((up - down) / (two * h), attempt > 0));
                    break;
                }
                h = h * hundredth;
            }
            let Some((numeric, refined)) = numeric else {
                report.skipped += 1;
                continue;
            };
            let err = (a - numeric).abs() / a.abs().max(T::one());
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
            }
            if refined {
                report.refined += 1;
            } else {
                report.checked += 1;
            }
        }
    }
    Ok(report)
}
