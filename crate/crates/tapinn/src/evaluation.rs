//! Post-training metrics: held-out physics residual and data MSE, gradient
//! stability statistics from step logs, the latent linear probe, and
//! embedding export for external visualisation.

use crate::autodiff::{DualScalar, NodeId, Tape};
use crate::losses::physics_residual_on_tape;
use crate::neural::{
    encoder_forward, generator_heads_on_tape, hypernet_forward, param_count, parametric_on_tape,
    target_on_tape, ModelKind, ModelParams, NeuralError, ObservationWindow,
};
use crate::sim::{fmt_f64, Dataset, Split};
use crate::training::{Method, PhaseTag, StepLog};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("too few records: {have} after filtering, need {need}")]
    TooFewRecords { have: usize, need: usize },
    #[error("singular probe system (pivot {0:e})")]
    Singular(f64),
    #[error("probe needs at least {need} samples, got {have}")]
    TooFewSamples { have: usize, need: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("eval io: {0}")]
    Io(#[from] std::io::Error),
    #[error("eval: {0}")]
    Other(String),
}

/// Per-run metric record; the rows of the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seed: u64,
    pub physics_residual: f64,
    pub data_mse: f64,
    pub param_count: usize,
    pub grad_norm_mean: f64,
    pub grad_norm_variance: f64,
    pub probe_mse: Option<f64>,
    pub probe_ridge: f64,
    pub n_collocation: usize,
    pub runtime_s: f64,
}

/// How a trained model is conditioned on a test trajectory.
fn condition_latent(
    params: &ModelParams,
    window: &ObservationWindow,
) -> Result<Vec<f64>, EvalError> {
    Ok(encoder_forward(params, window)?)
}

const EVAL_CHUNK: usize = 512;

/// Mean over test trajectories of the mean squared ODE residual at `n_c`
/// uniform collocation points per trajectory, drawn from a fixed evaluation
/// seed (stream = trajectory id, so the result is order-independent).
pub fn eval_physics_residual(
    params: &ModelParams,
    dataset: &Dataset,
    n_c: usize,
    eval_seed: u64,
) -> Result<f64, EvalError> {
    if n_c == 0 {
        return Err(EvalError::Other("n_c must be >= 1".into()));
    }
    let p = dataset.config.params;
    let t_max = dataset.config.t_max();
    let window_len = params.dims.window_len;
    let mut total = 0.0;
    let mut n_traj = 0usize;
    let mut tape: Tape<DualScalar> = Tape::new();
    for traj in dataset.iter_split(Split::Test) {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        rng.set_stream(traj.traj_id);
        let dist = Uniform::new(0.0, t_max);
        let ts: Vec<f64> = (0..n_c).map(|_| dist.sample(&mut rng)).collect();

        let z = match params.kind {
            ModelKind::Tapinn | ModelKind::MultiOutput => Some(condition_latent(
                params,
                &ObservationWindow::from_trajectory(traj, window_len)?,
            )?),
            _ => None,
        };
        let target_w = match params.kind {
            ModelKind::Hypernet => Some(hypernet_forward(params, traj.f0)?),
            _ => None,
        };

        let mut acc = 0.0;
        for chunk in ts.chunks(EVAL_CHUNK) {
            tape.clear();
            let lanes: Vec<DualScalar> = chunk.iter().map(|&t| DualScalar::seed(t)).collect();
            let t_node = tape.constant(&lanes);
            let x = eval_model_node(&mut tape, params, t_node, chunk.len(), traj.f0, &z, &target_w);
            let node = physics_residual_on_tape(&mut tape, x, chunk, traj.f0, &p);
            acc += tape.value(node) * chunk.len() as f64;
        }
        let res = acc / n_c as f64;
        if !res.is_finite() {
            return Err(EvalError::Other(format!(
                "non-finite residual on trajectory {}",
                traj.traj_id
            )));
        }
        total += res;
        n_traj += 1;
    }
    if n_traj == 0 {
        return Err(EvalError::Other("test split is empty".into()));
    }
    Ok(total / n_traj as f64)
}

fn eval_model_node(
    tape: &mut Tape<DualScalar>,
    params: &ModelParams,
    t_node: NodeId,
    lanes: usize,
    f0: f64,
    z: &Option<Vec<f64>>,
    target_w: &Option<Vec<f64>>,
) -> NodeId {
    match params.kind {
        ModelKind::Tapinn | ModelKind::MultiOutput => {
            let z = z.as_ref().expect("latent conditioning");
            let z_nodes: Vec<NodeId> = z
                .iter()
                .map(|&v| {
                    let s = tape.constant(&[DualScalar::constant(v)]);
                    tape.bcast(s, lanes)
                })
                .collect();
            generator_heads_on_tape(tape, params, t_node, &z_nodes)[0]
        }
        ModelKind::Parametric => {
            let lam = tape.constant(&[DualScalar::constant(f0)]);
            let lam_b = tape.bcast(lam, lanes);
            parametric_on_tape(tape, params, t_node, lam_b)
        }
        ModelKind::Hypernet => {
            let w = target_w.as_ref().expect("generated weights");
            let w_node = tape.constant_f64s(w);
            let tw: Vec<NodeId> = (0..w.len()).map(|j| tape.lane_slice(w_node, j, 1)).collect();
            target_on_tape(tape, params, &tw, t_node)
        }
    }
}

/// MSE of the predicted displacement against ground truth over every stored
/// timestep of every test trajectory.
pub fn eval_data_mse(params: &ModelParams, dataset: &Dataset) -> Result<f64, EvalError> {
    let window_len = params.dims.window_len;
    let mut total = 0.0;
    let mut n_traj = 0usize;
    let mut tape: Tape<DualScalar> = Tape::new();
    for traj in dataset.iter_split(Split::Test) {
        let z = match params.kind {
            ModelKind::Tapinn | ModelKind::MultiOutput => Some(condition_latent(
                params,
                &ObservationWindow::from_trajectory(traj, window_len)?,
            )?),
            _ => None,
        };
        let target_w = match params.kind {
            ModelKind::Hypernet => Some(hypernet_forward(params, traj.f0)?),
            _ => None,
        };
        let mut acc = 0.0;
        let mut n_pts = 0usize;
        let xs: Vec<f64> = traj.xs().collect();
        for (tc, xc) in traj.times.chunks(EVAL_CHUNK).zip(xs.chunks(EVAL_CHUNK)) {
            tape.clear();
            let lanes: Vec<DualScalar> = tc.iter().map(|&t| DualScalar::seed(t)).collect();
            let t_node = tape.constant(&lanes);
            let x = eval_model_node(&mut tape, params, t_node, tc.len(), traj.f0, &z, &target_w);
            for (pred, truth) in tape.lane_values(x).iter().zip(xc) {
                acc += (pred.v - truth) * (pred.v - truth);
            }
            n_pts += tc.len();
        }
        total += acc / n_pts as f64;
        n_traj += 1;
    }
    if n_traj == 0 {
        return Err(EvalError::Other("test split is empty".into()));
    }
    Ok(total / n_traj as f64)
}

/// Which step-log records enter the gradient statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWindow {
    /// Every logged step (baselines and the joint ablation).
    All,
    /// Steps after Phase I (physics-bearing steps of the phased schedule).
    PostPhase1,
}

/// Sample mean and unbiased sample variance of the per-step gradient norm.
pub fn gradient_stats(logs: &[StepLog], window: GradWindow) -> Result<(f64, f64), EvalError> {
    let norms: Vec<f64> = logs
        .iter()
        .filter(|l| match window {
            GradWindow::All => true,
            GradWindow::PostPhase1 => l.phase != PhaseTag::I,
        })
        .map(|l| l.grad_norm)
        .collect();
    if norms.len() < 2 {
        return Err(EvalError::TooFewRecords { have: norms.len(), need: 2 });
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

pub const PROBE_RIDGE: f64 = 1e-8;

/// Closed-form least squares with intercept (normal equations, tiny ridge
/// for conditioning); returns the mean squared error of the fitted linear
/// predictor on the same embeddings.
pub fn linear_probe(embeddings: &[Vec<f64>], f0_labels: &[f64]) -> Result<f64, EvalError> {
    let n = embeddings.len();
    if n == 0 || n != f0_labels.len() {
        return Err(EvalError::Other("embedding/label length mismatch".into()));
    }
    let d = embeddings[0].len() + 1;
    if n < d {
        return Err(EvalError::TooFewSamples { have: n, need: d });
    }
    // A = X^T X + ridge*I, b = X^T y with X = [1, z]
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for (z, &y) in embeddings.iter().zip(f0_labels) {
        let mut row = Vec::with_capacity(d);
        row.push(1.0);
        row.extend_from_slice(z);
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            b[i] += row[i] * y;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += PROBE_RIDGE;
    }
    let w = solve_gaussian(&mut a, &mut b)?;
    let mut mse = 0.0;
    for (z, &y) in embeddings.iter().zip(f0_labels) {
        let pred = w[0] + z.iter().zip(&w[1..]).map(|(zi, wi)| zi * wi).sum::<f64>();
        mse += (pred - y) * (pred - y);
    }
    Ok(mse / n as f64)
}

fn solve_gaussian(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>, EvalError> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-300 {
            return Err(EvalError::Singular(a[pivot_row][col]));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Latent vectors for every trajectory of a split, in trajectory order.
pub fn split_embeddings(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<u64>, Vec<f64>, Vec<Vec<f64>>), EvalError> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut zs = Vec::new();
    for traj in dataset.iter_split(split) {
        let w = ObservationWindow::from_trajectory(traj, params.dims.window_len)?;
        zs.push(encoder_forward(params, &w)?);
        ids.push(traj.traj_id);
        labels.push(traj.f0);
    }
    Ok((ids, labels, zs))
}

/// Write `traj_id,f0,z_0..z_{d-1}` rows for a split.
pub fn export_embeddings(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    path: &Path,
) -> Result<(), EvalError> {
    let (ids, labels, zs) = split_embeddings(params, dataset, split)?;
    let d_z = params.dims.d_z;
    let mut out = String::from("traj_id,f0");
    for j in 0..d_z {
        let _ = write!(out, ",z_{j}");
    }
    out.push('\n');
    for ((id, f0), z) in ids.iter().zip(&labels).zip(&zs) {
        let _ = write!(out, "{},{}", id, fmt_f64(*f0));
        for v in z {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean inter-regime distance over mean intra-regime distance; > 1 means
/// regimes form separated clusters.
pub fn separation_statistic(embeddings: &[Vec<f64>], labels: &[f64]) -> f64 {
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra.0 += d;
                intra.1 += 1;
            } else {
                inter.0 += d;
                inter.1 += 1;
            }
        }
    }
    (inter.0 / inter.1.max(1) as f64) / (intra.0 / intra.1.max(1) as f64).max(1e-300)
}

/// Assemble the full report for one finished run.
pub fn evaluate_run(
    params: &ModelParams,
    dataset: &Dataset,
    logs: &[StepLog],
    method: Method,
    seed: u64,
    n_collocation: usize,
    eval_seed: u64,
) -> Result<EvalReport, EvalError> {
    let started = std::time::Instant::now();
    let physics_residual = eval_physics_residual(params, dataset, n_collocation, eval_seed)?;
    let data_mse = eval_data_mse(params, dataset)?;
    let window = match method {
        Method::TapinnAo => GradWindow::PostPhase1,
        _ => GradWindow::All,
    };
    let (grad_norm_mean, grad_norm_variance) = gradient_stats(logs, window)?;
    let probe_mse = match params.kind {
        ModelKind::Tapinn | ModelKind::MultiOutput => {
            let (_, labels, zs) = split_embeddings(params, dataset, Split::Test)?;
            Some(linear_probe(&zs, &labels)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        method,
        seed,
        physics_residual,
        data_mse,
        param_count: param_count(params),
        grad_norm_mean,
        grad_norm_variance,
        probe_mse,
        probe_ridge: PROBE_RIDGE,
        n_collocation,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Parse a `steplog.csv` written by the training loop.
pub fn parse_steplog_csv(text: &str) -> Result<Vec<StepLog>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("step,epoch,phase,") {
                return Err(EvalError::Other(format!("bad steplog header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(EvalError::Other(format!("steplog line {}: {} columns", i + 1, cols.len())));
        }
        let num = |j: usize| -> Result<f64, EvalError> {
            cols[j]
                .parse()
                .map_err(|_| EvalError::Other(format!("steplog line {}: bad number {}", i + 1, cols[j])))
        };
        let phase = match cols[2] {
            "I" => PhaseTag::I,
            "II" => PhaseTag::II,
            "joint" => PhaseTag::Joint,
            "baseline" => PhaseTag::Baseline,
            other => return Err(EvalError::Other(format!("unknown phase {other:?}"))),
        };
        let alpha = 1.0;
        let beta = 0.1;
        out.push(StepLog {
            step: num(0)? as u64,
            epoch: num(1)? as usize,
            phase,
            loss: crate::losses::LossBreakdown {
                data: num(3)?,
                physics: num(4)?,
                metric: num(5)?,
                total: num(6)?,
                alpha,
                beta,
            },
            grad_norm: num(7)?,
            wall_ms: num(8)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Aggregation across runs
// ---------------------------------------------------------------------------

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_of<F: Fn(&EvalReport) -> f64>(reports: &[&EvalReport], f: F) -> f64 {
    let mut v: Vec<f64> = reports.iter().map(|r| f(r)).collect();
    median(&mut v)
}

/// One aggregate CSV row per (method, seed).
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "method,seed,physics_residual,data_mse,param_count,grad_norm_mean,grad_norm_variance,probe_mse,runtime_s\n",
    );
    for r in reports {
        let probe = r.probe_mse.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.method,
            r.seed,
            fmt_f64(r.physics_residual),
            fmt_f64(r.data_mse),
            r.param_count,
            fmt_f64(r.grad_norm_mean),
            fmt_f64(r.grad_norm_variance),
            probe,
            r.runtime_s
        );
    }
    out
}

/// Render the comparison table (medians over seeds) in the fixed row order,
/// followed by the gradient-stability ratios and the probe line.
pub fn render_comparison(reports: &[EvalReport]) -> String {
    let rows = [
        (Method::Parametric, "Parametric Baseline"),
        (Method::MultiOutput, "Multi-Output"),
        (Method::Hyperpinn, "HyperPINN"),
        (Method::TapinnAo, "Ours (AO)"),
        (Method::TapinnJoint, "Joint Training (ablation)"),
    ];
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>13} {:>8} {:>10}", "Method", "Physics Res.", "Params", "Data MSE");
    let _ = writeln!(out, "{}", "-".repeat(63));
    for (method, label) in rows {
        let group: Vec<&EvalReport> = reports.iter().filter(|r| r.method == method).collect();
        if group.is_empty() {
            continue;
        }
        let res = median_of(&group, |r| r.physics_residual);
        let mse = median_of(&group, |r| r.data_mse);
        let _ = writeln!(
            out,
            "{:<28} {:>13.4} {:>8} {:>10.4}",
            label, res, group[0].param_count, mse
        );
    }
    let tap: Vec<&EvalReport> = reports.iter().filter(|r| r.method == Method::TapinnAo).collect();
    let multi: Vec<&EvalReport> =
        reports.iter().filter(|r| r.method == Method::MultiOutput).collect();
    if !tap.is_empty() && !multi.is_empty() {
        let mean_ratio =
            median_of(&multi, |r| r.grad_norm_mean) / median_of(&tap, |r| r.grad_norm_mean);
        let var_ratio = median_of(&multi, |r| r.grad_norm_variance)
            / median_of(&tap, |r| r.grad_norm_variance);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "grad-norm ratio (multi_output / tapinn_ao): mean {mean_ratio:.2}x, variance {var_ratio:.2}x"
        );
    }
    let probes: Vec<f64> = tap.iter().filter_map(|r| r.probe_mse).collect();
    if !probes.is_empty() {
        let mut p = probes;
        let _ = writeln!(out, "linear-probe prognostics MSE (tapinn_ao): {:.3e}", median(&mut p));
    }
    out
}
