use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, must lie in `[1e-6, 1e-4]`.
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, scale_floor: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` where `max_rel_err` was attained.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares reverse-mode gradients of the scalar `f` against central differences.
///
/// `f` receives one differentiable leaf per input, all on a fresh tape.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return invalid(format!("grad_check step {} outside [1e-6, 1e-4]", opts.h));
    }
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&vars)?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        Ok((tape, vars, out))
    };

    let (_tape, vars, out) = eval(inputs)?;
    let grads = out.backward()?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.tensor(v)).collect();
    drop((_tape, vars, out));

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for i in 0..inputs.len() {
        let mut num = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.h;
            let fp = eval(&work)?.2.item()?;
            work[i].data_mut()[j] = orig - opts.h;
            let fm = eval(&work)?.2.item()?;
            work[i].data_mut()[j] = orig;
            num[j] = (fp - fm) / (2.0 * opts.h);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(num[j].abs()).max(opts.scale_floor);
            let rel = (a - num[j]).abs() / denom;
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = rel;
                worst = Some((i, j));
            }
            checked += 1;
        }
        numeric.push(Tensor::new(inputs[i].shape(), num)?);
    }
    Ok(GradCheckReport { max_rel_err, worst, checked, passed: max_rel_err <= opts.tol, analytic, numeric })
}
