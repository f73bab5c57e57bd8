//! Central-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` seen.
    pub max_rel_error: f64,
    /// `(tensor, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compare reverse-mode gradients of `f` against central differences
/// `(f(p + eps e) - f(p - eps e)) / 2 eps` at the given coordinates (every
/// coordinate when `coords` is `None`).
///
/// `f` builds a scalar on a fresh tape from one leaf per parameter tensor.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective = {value}")));
        }
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(out)?;
        Ok((value, vars.iter().map(|&v| g.take(v)).collect()))
    };

    let (_, analytic) = eval(params, true)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(t, p)| (0..p.numel()).map(move |e| (t, e)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(t, e) in coords {
        let orig = params[t].data()[e];
        work[t].data_mut()[e] = orig + eps;
        let (plus, _) = eval(&work, false)?;
        work[t].data_mut()[e] = orig - eps;
        let (minus, _) = eval(&work, false)?;
        work[t].data_mut()[e] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let ad = analytic[t].as_ref().map_or(0.0, |g| g.data()[e]);
        if !ad.is_finite() || !fd.is_finite() {
            return Err(Error::NonFinite(format!("gradient at ({t},{e})")));
        }
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (t, e);
        }
        report.checked += 1;
    }
    Ok(report)
}
