//! Differentiation engine.
//!
//! Two cooperating pieces:
//!
//! * [`DualScalar`] — forward-mode value/first/second derivative triple with
//!   respect to a single seed variable (the generator's time input).
//! * [`Tape`] — a lane-vectorised op record giving exact reverse-mode
//!   gradients. With `f64` lanes it differentiates ordinary scalar losses;
//!   with [`DualScalar`] lanes the recorded computation *is* the forward
//!   Taylor pass, and the reverse sweep yields parameter gradients of
//!   losses built from `x`, `x'` and `x''`.
//!
//! Everything is rebuilt per step: tapes are cleared and reused, never
//! persisted.

mod dual;
mod tape;

pub use dual::{DualScalar, Lane, Scalar, UnaryKind};
pub use tape::{GradientVector, NodeId, ParamStore, Tape};

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("non-finite {what}")]
    NonFinite { what: String },
}

/// Loss value and exact reverse-mode gradient of a scalar loss built on a
/// value tape over `store`'s parameter arrays.
pub fn grad<S, F>(store: &S, build: F) -> Result<(f64, GradientVector), AdError>
where
    S: ParamStore + ?Sized,
    F: FnOnce(&mut Tape<f64>) -> NodeId,
{
    let mut tape = Tape::new();
    let out = build(&mut tape);
    assert_eq!(tape.lanes(out), 1, "loss node must be scalar");
    let loss = tape.value(out);
    if !loss.is_finite() {
        return Err(AdError::NonFinite { what: format!("loss value {loss}") });
    }
    let mut grads = GradientVector::zeros_like(store);
    tape.backward(store, &[(out, 0, 1.0)], &mut grads);
    if !grads.all_finite() {
        return Err(AdError::NonFinite { what: "gradient entry".into() });
    }
    Ok((loss, grads))
}

/// Evaluate a scalar-in/scalar-out map with `t` seeded as `(t, 1, 0)` and
/// return `(x, dx/dt, d2x/dt2)`.
pub fn time_derivatives<F>(f: F, t: f64) -> (f64, f64, f64)
where
    F: FnOnce(DualScalar) -> DualScalar,
{
    let y = f(DualScalar::seed(t));
    (y.v, y.d1, y.d2)
}

/// Central finite differences of a scalar function of the parameter arrays;
/// the independent oracle used to check every gradient path.
pub fn fd_grad<F>(params: &[Vec<f64>], mut eval: F, h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work = params.to_vec();
    let mut out: Vec<Vec<f64>> = params.iter().map(|a| vec![0.0; a.len()]).collect();
    for slot in 0..params.len() {
        for i in 0..params[slot].len() {
            let orig = work[slot][i];
            work[slot][i] = orig + h;
            let up = eval(&work);
            work[slot][i] = orig - h;
            let dn = eval(&work);
            work[slot][i] = orig;
            out[slot][i] = (up - dn) / (2.0 * h);
        }
    }
    out
}
