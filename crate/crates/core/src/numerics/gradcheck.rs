//! Central finite-difference gradient checking.
//!
//! The checked function may return a node of any shape; it is reduced to a
//! scalar by a fixed pseudo-random projection so every output element takes
//! part in the comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so exactly-zero gradients
/// compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input, element) with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projected_loss<F>(tape: &mut Tape, inputs: &[Var], f: &F) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let out = f(tape, inputs)?;
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0005_eed0_f9ad);
    let proj: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj = tape.constant(tape.shape(out).to_vec(), proj)?;
    let prod = tape.mul(out, proj)?;
    Ok(tape.sum_all(prod))
}

/// Compares reverse-mode gradients of `f` with respect to every element of
/// every input against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let build = |values: &[Vec<f64>], grad: bool| -> Result<(Tape, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), v)| tape.leaf(shape.clone(), v.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        Ok((tape, vars))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();

    let (mut tape, vars) = build(&base, true)?;
    let loss = projected_loss(&mut tape, &vars, &f)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&base)
        .map(|(&v, b)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b.len()]))
        .collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let (mut tape, vars) = build(values, false)?;
        let loss = projected_loss(&mut tape, &vars, &f)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut values = base.clone();
    for (input, grads) in analytic.iter().enumerate() {
        for elem in 0..grads.len() {
            let x = base[input][elem];
            values[input][elem] = x + h;
            let plus = eval(&values)?;
            values[input][elem] = x - h;
            let minus = eval(&values)?;
            values[input][elem] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grads[elem], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((input, elem));
            }
        }
    }
    Ok(report)
}

/// Same comparison for the parameters of a model: `f` builds the output from
/// `store`, and every parameter element (or, when `max_per_param` is set, an
/// evenly spaced subset) is perturbed in place.
pub fn check_param_gradients<F>(store: &ParamStore, h: f64, max_per_param: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let g = |tape: &mut Tape, _: &[Var], s: &ParamStore| f(tape, s);
    let mut tape = Tape::new();
    let loss = projected_loss(&mut tape, &[], &|t: &mut Tape, v: &[Var]| g(t, v, store))?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, grad) in tape.param_grads() {
        for (a, g) in analytic[id.0].iter_mut().zip(grad) {
            *a += g;
        }
    }
    let mut local = store.clone();
    let eval = |local: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = projected_loss(&mut tape, &[], &|t: &mut Tape, v: &[Var]| g(t, v, local))?;
        Ok(tape.scalar(loss))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pid, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let stride = max_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for elem in (0..n).step_by(stride) {
            let x = store.get(ParamId(pid)).value[elem];
            local.get_mut(ParamId(pid)).value[elem] = x + h;
            let plus = eval(&local)?;
            local.get_mut(ParamId(pid)).value[elem] = x - h;
            let minus = eval(&local)?;
            local.get_mut(ParamId(pid)).value[elem] = x;
            let err = relative_error(grads[elem], (plus - minus) / (2.0 * h));
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pid, elem));
            }
        }
    }
    Ok(report)
}
