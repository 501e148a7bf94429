use super::{GradTape, Matrix, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per scalar entry, grouped by parameter tensor.
    pub relative_errors: Vec<Vec<f64>>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// `(tensor, entry)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.relative_errors.iter().map(Vec::len).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Builds `f` on a fresh tape over `params` and returns its value with the
/// gradient of every parameter.
pub fn value_and_grad<F>(f: &F, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let value = tape.value(root).data()[0];
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn evaluate<F>(f: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).data()[0])
}

/// Central-difference check of every scalar in `params`.
///
/// `f` must build a deterministic scalar on the tape it is handed. Relative
/// error uses the denominator `max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let (_, analytic) = value_and_grad(&f, params)?;
    let mut probe = params.to_vec();
    let mut relative_errors = Vec::with_capacity(params.len());
    let (mut max_rel_err, mut total, mut count) = (0.0f64, 0.0, 0usize);
    let mut worst = None;

    for t in 0..params.len() {
        let mut errs = Vec::with_capacity(params[t].len());
        for i in 0..params[t].len() {
            let original = params[t].data()[i];
            probe[t].data_mut()[i] = original + eps;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = original - eps;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Probe {
                    tensor: t,
                    index: i,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[t].data()[i], numeric);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(err);
                worst = Some((t, i));
            }
            total += err;
            count += 1;
            errs.push(err);
        }
        relative_errors.push(errs);
    }

    Ok(GradCheckReport {
        relative_errors,
        max_rel_err,
        mean_rel_err: if count == 0 {
            0.0
        } else {
            total / count as f64
        },
        worst,
    })
}
