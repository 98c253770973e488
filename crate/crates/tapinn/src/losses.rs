//! Training objectives: data MSE, ODE residual, in-batch triplet loss,
//! Sobolev loss, and the weighted composite.
//!
//! Each loss exists in two forms with identical values: a plain function of
//! arrays (used by evaluation and as the oracle in tests) and a tape builder
//! (used by the training loops, where gradients are needed).

use crate::autodiff::{DualScalar, NodeId, Tape};
use crate::neural::TimeModel;
use crate::sim::DuffingParams;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss term: {0}")]
    NonFinite(String),
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
}

/// Mean squared error between predictions and targets.
pub fn data_loss(predictions: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(LossError::LengthMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// ODE residual at one point given the solution derivatives and a forcing
/// value: `x'' + delta x' + alpha x + beta x^3 - forcing`.
pub fn ode_residual(x: f64, xd: f64, xdd: f64, forcing: f64, p: &DuffingParams) -> f64 {
    xdd + p.delta * xd + p.alpha * x + p.beta * x * x * x - forcing
}

/// Mean squared residual of a conditioned model with an arbitrary forcing
/// term; the cosine-forced version below is the training quantity, this one
/// also serves manufactured-solution checks.
pub fn physics_residual_with_forcing<M, F>(
    model: &M,
    t_points: &[f64],
    p: &DuffingParams,
    forcing: F,
) -> Result<f64, LossError>
where
    M: TimeModel,
    F: Fn(f64) -> f64,
{
    if t_points.is_empty() {
        return Err(LossError::LengthMismatch("no collocation points".into()));
    }
    let mut acc = 0.0;
    for &t in t_points {
        let (x, xd, xdd) = model.time_derivatives(t);
        let r = ode_residual(x, xd, xdd, forcing(t), p);
        acc += r * r;
    }
    let out = acc / t_points.len() as f64;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(LossError::NonFinite(format!("physics residual {out}")))
    }
}

/// Mean squared ODE residual under the benchmark forcing `f0 cos(omega t)`.
pub fn physics_residual<M: TimeModel>(
    model: &M,
    f0: f64,
    t_points: &[f64],
    p: &DuffingParams,
) -> Result<f64, LossError> {
    physics_residual_with_forcing(model, t_points, p, |t| f0 * (p.omega * t).cos())
}

/// Outcome of the in-batch triplet enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub n_triplets: usize,
    /// No valid triplet existed (single-label batch); value is 0.
    pub degenerate: bool,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean hinge `max(0, d(z_a, z_p) - d(z_a, z_n) + margin)` over all ordered
/// in-batch triplets with label(a) = label(p), a != p, label(n) != label(a).
/// No hard or semi-hard mining.
pub fn triplet_loss(
    embeddings: &[Vec<f64>],
    f0_labels: &[f64],
    margin: f64,
) -> Result<TripletLoss, LossError> {
    if embeddings.len() != f0_labels.len() || embeddings.len() < 2 {
        return Err(LossError::LengthMismatch(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            f0_labels.len()
        )));
    }
    if margin <= 0.0 {
        return Err(LossError::BadMargin(margin));
    }
    let n = embeddings.len();
    let mut acc = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in 0..n {
            if p == a || f0_labels[p] != f0_labels[a] {
                continue;
            }
            let d_ap = euclidean(&embeddings[a], &embeddings[p]);
            for neg in 0..n {
                if f0_labels[neg] == f0_labels[a] {
                    continue;
                }
                let d_an = euclidean(&embeddings[a], &embeddings[neg]);
                acc += (d_ap - d_an + margin).max(0.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        Ok(TripletLoss { value: 0.0, n_triplets: 0, degenerate: true })
    } else {
        Ok(TripletLoss { value: acc / count as f64, n_triplets: count, degenerate: false })
    }
}

/// H1 supervision: MSE on values plus MSE on first derivatives, equally
/// weighted.
pub fn sobolev_loss(
    model_outputs: &[(f64, f64)],
    targets: &[(f64, f64)],
) -> Result<f64, LossError> {
    if model_outputs.len() != targets.len() || model_outputs.is_empty() {
        return Err(LossError::LengthMismatch(format!(
            "{} outputs vs {} targets",
            model_outputs.len(),
            targets.len()
        )));
    }
    let xs: Vec<f64> = model_outputs.iter().map(|o| o.0).collect();
    let xds: Vec<f64> = model_outputs.iter().map(|o| o.1).collect();
    let tx: Vec<f64> = targets.iter().map(|t| t.0).collect();
    let tv: Vec<f64> = targets.iter().map(|t| t.1).collect();
    Ok(data_loss(&xs, &tx)? + data_loss(&xds, &tv)?)
}

/// Composite loss record: `total = data + alpha*physics + beta*metric`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub data: f64,
    pub physics: f64,
    pub metric: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn total_loss(
    data: f64,
    physics: f64,
    metric: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown, LossError> {
    let total = data + alpha * physics + beta * metric;
    if !total.is_finite() {
        return Err(LossError::NonFinite(format!(
            "total = {data} + {alpha}*{physics} + {beta}*{metric}"
        )));
    }
    Ok(LossBreakdown { data, physics, metric, total, alpha, beta })
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// MSE node between a prediction node and fixed targets (lane-aligned).
pub fn data_loss_on_tape<L: crate::autodiff::Lane>(
    tape: &mut Tape<L>,
    pred: NodeId,
    targets: &[f64],
) -> NodeId {
    debug_assert_eq!(tape.lanes(pred), targets.len());
    let tgt = tape.constant_f64s(targets);
    let d = tape.sub(pred, tgt);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

/// Mean squared ODE residual node from a dual-lane solution node whose lanes
/// were seeded at `t_points`.
pub fn physics_residual_on_tape(
    tape: &mut Tape<DualScalar>,
    x: NodeId,
    t_points: &[f64],
    f0: f64,
    p: &DuffingParams,
) -> NodeId {
    debug_assert_eq!(tape.lanes(x), t_points.len());
    let xdd = tape.extract_d2(x);
    let xd = tape.extract_d1(x);
    let damping = tape.mul_c(xd, p.delta);
    let linear = tape.mul_c(x, p.alpha);
    let x3 = tape.powi(x, 3);
    let cubic = tape.mul_c(x3, p.beta);
    let lhs = tape.sum_n(&[xdd, damping, linear, cubic]);
    let forcing: Vec<f64> = t_points.iter().map(|&t| f0 * (p.omega * t).cos()).collect();
    let forcing_node = tape.constant_f64s(&forcing);
    let r = tape.sub(lhs, forcing_node);
    let r2 = tape.mul(r, r);
    tape.mean(r2)
}

/// Triplet hinge node over per-item latent component nodes (each lane-1).
/// Returns `None` for degenerate (single-label) batches.
pub fn triplet_loss_on_tape(
    tape: &mut Tape<f64>,
    item_latents: &[Vec<NodeId>],
    f0_labels: &[f64],
    margin: f64,
) -> Option<(NodeId, usize)> {
    let n = item_latents.len();
    debug_assert_eq!(n, f0_labels.len());
    // Pairwise distances, computed once per unordered pair.
    let mut dist: Vec<Vec<Option<NodeId>>> = vec![vec![None; n]; n];
    fn dist_of(
        tape: &mut Tape<f64>,
        item_latents: &[Vec<NodeId>],
        a: usize,
        b: usize,
        dist: &mut [Vec<Option<NodeId>>],
    ) -> NodeId {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if let Some(d) = dist[lo][hi] {
            return d;
        }
        let diffs: Vec<NodeId> = item_latents[lo]
            .iter()
            .zip(&item_latents[hi])
            .map(|(&x, &y)| {
                let d = tape.sub(x, y);
                tape.mul(d, d)
            })
            .collect();
        let ssq = tape.sum_n(&diffs);
        let d = tape.sqrt(ssq);
        dist[lo][hi] = Some(d);
        d
    }

    let mut hinges: Vec<NodeId> = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || f0_labels[p] != f0_labels[a] {
                continue;
            }
            let d_ap = dist_of(tape, item_latents, a, p, &mut dist);
            for neg in 0..n {
                if f0_labels[neg] == f0_labels[a] {
                    continue;
                }
                let d_an = dist_of(tape, item_latents, a, neg, &mut dist);
                let gap = tape.sub(d_ap, d_an);
                let shifted = tape.add_c(gap, margin);
                hinges.push(tape.relu(shifted));
            }
        }
    }
    if hinges.is_empty() {
        return None;
    }
    let total = tape.sum_n(&hinges);
    let mean = tape.mul_c(total, 1.0 / hinges.len() as f64);
    Some((mean, hinges.len()))
}

/// Sobolev node: value MSE plus derivative-head MSE.
pub fn sobolev_loss_on_tape<L: crate::autodiff::Lane>(
    tape: &mut Tape<L>,
    x_pred: NodeId,
    xd_pred: NodeId,
    x_targets: &[f64],
    v_targets: &[f64],
) -> NodeId {
    let lx = data_loss_on_tape(tape, x_pred, x_targets);
    let lv = data_loss_on_tape(tape, xd_pred, v_targets);
    tape.add(lx, lv)
}
