//! Central finite-difference checking of tape gradients.

use super::{Mode, Tape, Tensor, TensorError, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares `backward` against `(f(x+ε) − f(x−ε)) / 2ε` for every entry of
/// every parameter. `build` registers `params` in order and returns a scalar.
pub fn check_gradients<F>(params: &[Tensor], eps: f64, build: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new(Mode::Eval);
        let vars = ps.iter().map(|p| tape.param(p)).collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let grads = {
        let mut tape = Tape::new(Mode::Eval);
        let vars = params.iter().map(|p| tape.param(p)).collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss)?
    };

    let mut work = params.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for pi in 0..work.len() {
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.slots[pi][j];
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
