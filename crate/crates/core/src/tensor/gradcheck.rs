use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`]. Gradients smaller than this are
/// compared on an absolute scale, where finite differences carry no signal.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// `(param index, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
}

/// Compares `backward()` against central differences on every coordinate.
///
/// `f` builds a scalar loss on a fresh tape from leaf handles for `params`
/// (registered in order, all requiring gradients). It must be deterministic.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    drop(tape);

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: (0, 0),
    };
    let h = T::cst(eps);
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let (t_plus, _, l_plus) = eval(&work)?;
            let f_plus = t_plus.value(l_plus).data()[0];
            work[pi].data_mut()[j] = orig - h;
            let (t_minus, _, l_minus) = eval(&work)?;
            let f_minus = t_minus.value(l_minus).data()[0];
            work[pi].data_mut()[j] = orig;

            let numeric = (f_plus - f_minus).to_f64().unwrap_or(f64::NAN) / (2.0 * eps);
            let a = analytic[pi][j].to_f64().unwrap_or(f64::NAN);
            let rel = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (pi, j);
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            report.coordinates += 1;
        }
    }
    Ok(report)
}
