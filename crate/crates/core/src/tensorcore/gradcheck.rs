//! Central finite-difference check of tape gradients.

use super::param::{Gradients, ParamId, Parameterized};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions<T> {
    pub eps: T,
    /// Multiplies analytic gradients before comparison. Anything other than
    /// one is a fault injection used to prove the checker can fail.
    pub analytic_scale: T,
    /// Check at most this many evenly spaced elements of each parameter.
    pub max_elements_per_param: Option<usize>,
}

impl<T: Scalar> GradCheckOptions<T> {
    pub fn new(eps: T) -> Self {
        GradCheckOptions {
            eps,
            analytic_scale: T::one(),
            max_elements_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter and flat element attaining the maximum.
    pub worst: Option<(ParamId, usize)>,
    /// Elements compared against a finite difference.
    pub checked: usize,
    /// Elements whose numeric estimate needed a one-sided or shorter
    /// stencil because the symmetric one straddled a relu or clamp kink.
    pub kink_adjusted: usize,
    /// Elements left uncompared because every stencil tried straddled a kink.
    pub skipped: usize,
}

/// Step shrink attempts after the first stencil meets a kink.
const KINK_RETRIES: usize = 3;

/// Compares tape gradients of `loss_fn` against central differences over
/// every parameter element of `model`.
pub fn grad_check<T, M, F>(model: &mut M, eps: T, loss_fn: F) -> Result<GradCheckReport>
where
    T: Scalar,
    M: Parameterized<T>,
    F: FnMut(&M, &mut Tape<T>) -> Result<Var>,
{
    grad_check_with(model, GradCheckOptions::new(eps), loss_fn)
}

/// Like [`grad_check`] with explicit options.
///
/// A difference quotient is only meaningful when every evaluation in the
/// stencil takes the same relu and clamp branches as the unperturbed pass
/// (see [`Tape::branch_pattern`]). When the central stencil crosses a kink,
/// the second-order one-sided stencil on the clean side is used instead,
/// `(-3f(x) + 4f(x+h) - f(x+2h)) / 2h`, and failing that `h` shrinks
/// tenfold.
pub fn grad_check_with<T, M, F>(
    model: &mut M,
    opts: GradCheckOptions<T>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    M: Parameterized<T>,
    F: FnMut(&M, &mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(model, &mut tape)?;
    let mut grads = Gradients::new();
    tape.backward(loss, &mut grads)?;
    let f0 = tape.value(loss).item()?.as_f64();
    let base = tape.branch_pattern();
    drop(tape);

    let mut sizes = Vec::new();
    model.visit_params(&mut |p| sizes.push((p.id, p.value.len())));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kink_adjusted: 0,
        skipped: 0,
    };
    for (index, &(id, len)) in sizes.iter().enumerate() {
        let analytic = grads.get(id).map(|g| g.data().to_vec());
        let stride = match opts.max_elements_per_param {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for element in (0..len).step_by(stride) {
            let orig = read(model, id, element);
            let mut at = |offset: T| -> Result<(f64, bool)> {
                write(model, id, element, orig + offset);
                let mut tape = Tape::new();
                let value = loss_fn(model, &mut tape).and_then(|l| Ok(tape.value(l).item()?.as_f64()));
                let same = value.is_ok() && tape.branch_pattern() == base;
                write(model, id, element, orig);
                let value = value?;
                if !value.is_finite() {
                    return Err(Error::GradCheckNonFinite { param: index, element });
                }
                Ok((value, same))
            };

            let mut h = opts.eps;
            let mut numeric = None;
            for attempt in 0..=KINK_RETRIES {
                let two_h = 2.0 * h.as_f64();
                let (fp, plus_clean) = at(h)?;
                let (fm, minus_clean) = at(-h)?;
                if plus_clean && minus_clean {
                    numeric = Some((fp - fm) / two_h);
                } else if plus_clean {
                    let (fp2, clean) = at(h + h)?;
                    if clean {
                        numeric = Some((-3.0 * f0 + 4.0 * fp - fp2) / two_h);
                    }
                } else if minus_clean {
                    let (fm2, clean) = at(-(h + h))?;
                    if clean {
                        numeric = Some((3.0 * f0 - 4.0 * fm + fm2) / two_h);
                    }
                }
                if numeric.is_some() {
                    if attempt > 0 || !(plus_clean && minus_clean) {
                        report.kink_adjusted += 1;
                    }
                    break;
                }
                h = h * T::lit(0.1);
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic.as_ref().map_or(0.0, |g| g[element].as_f64()) * opts.analytic_scale.as_f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((id, element));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn read<T: Scalar, M: Parameterized<T>>(model: &M, id: ParamId, element: usize) -> T {
    let mut out = T::zero();
    model.visit_params(&mut |p| {
        if p.id == id {
            out = p.value.data()[element];
        }
    });
    out
}

fn write<T: Scalar, M: Parameterized<T>>(model: &mut M, id: ParamId, element: usize, v: T) {
    model.visit_params_mut(&mut |p| {
        if p.id == id {
            p.value.data_mut()[element] = v;
        }
    });
}
