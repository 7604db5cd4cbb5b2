use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f32,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Restrict the check to these flat coordinates (all when `None`).
    pub coords: Option<Vec<usize>>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-3,
            coords: None,
        }
    }
}

impl FdOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub mean_rel: f64,
    pub pass: bool,
    pub checked: usize,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.scalar(out)?;
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value {y} is not finite")));
    }
    Ok(y)
}

/// Compares the tape gradient of the scalar function `f` at `x` with
/// central finite differences.
///
/// Errors are normwise: each coordinate's `|a - n|` is divided by the
/// largest analytic or numeric gradient magnitude, so `max_rel` is the
/// infinity-norm relative error. f32 rounding of the forward value would
/// otherwise swamp coordinates whose gradient is tiny.
pub fn finite_diff_check<F>(f: F, x: &Tensor, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().requiring_grad());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(v) {
        Some(g) => g.iter().map(|&g| g as f64).collect(),
        None => vec![0.0; x.numel()],
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }

    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..x.numel()).collect(),
    };
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in &coords {
        let x0 = x.data()[i];
        let (xp, xm) = (x0 + opts.h, x0 - opts.h);
        probe.data_mut()[i] = xp;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = xm;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = x0;
        numeric.push((fp - fm) / (xp as f64 - xm as f64));
    }

    let scale = coords
        .iter()
        .zip(&numeric)
        .map(|(&i, n)| analytic[i].abs().max(n.abs()))
        .fold(0.0, f64::max);
    let denom = scale.max(f64::MIN_POSITIVE);
    let mut max_rel = 0f64;
    let mut sum_rel = 0f64;
    for (&i, &n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        let rel = (a - n).abs() / denom;
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    let mean_rel = if coords.is_empty() {
        0.0
    } else {
        sum_rel / coords.len() as f64
    };
    Ok(FdReport {
        max_rel,
        mean_rel,
        pass: max_rel < opts.tol,
        checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[4], vec![0.25, -0.5, 0.75, 1.0]).unwrap();
        let r = finite_diff_check(|t, v| Ok(t.sum(v)), &x, &FdOptions::default()).unwrap();
        assert_eq!(r.max_rel, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::new(&[2], vec![100.0, 90.0]).unwrap();
        let f = |t: &mut Tape, v: Var| {
            let e = t.exp(v);
            let e = t.exp(e);
            Ok(t.sum(e))
        };
        assert!(matches!(
            finite_diff_check(f, &x, &FdOptions::default()),
            Err(Error::Numeric(_))
        ));
    }
}
