//! Training loops: the phased alternating-optimisation schedule for the
//! encoder/generator pair, the joint-training ablation, and the three
//! baselines, all driven by one seeded configuration.

mod adam;
mod steps;

pub use adam::{adam_step, AdamState};

use crate::losses::LossBreakdown;
use crate::neural::{
    init_params, save_checkpoint, Dims, ModelKind, ModelParams, NeuralError, ObservationWindow,
};
use crate::sim::{Dataset, SimError, Split};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("run diverged: method {method} seed {seed} step {step}: {what}")]
    Diverged { method: Method, seed: u64, step: u64, what: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TapinnAo,
    TapinnJoint,
    Parametric,
    Hyperpinn,
    MultiOutput,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TapinnAo,
        Method::TapinnJoint,
        Method::Parametric,
        Method::Hyperpinn,
        Method::MultiOutput,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TapinnAo => "tapinn_ao",
            Method::TapinnJoint => "tapinn_joint",
            Method::Parametric => "parametric",
            Method::Hyperpinn => "hyperpinn",
            Method::MultiOutput => "multi_output",
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        match self {
            Method::TapinnAo | Method::TapinnJoint => ModelKind::Tapinn,
            Method::Parametric => ModelKind::Parametric,
            Method::Hyperpinn => ModelKind::Hypernet,
            Method::MultiOutput => ModelKind::MultiOutput,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| {
                format!(
                    "unknown method {s:?}; valid: {}",
                    Method::ALL.map(|m| m.as_str()).join(", ")
                )
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full experiment description for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub k_joint: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dims: Dims,
    /// Fresh uniform collocation points per batch item per step.
    pub collocation_per_item: usize,
    /// Uniformly strided supervision points per trajectory.
    pub data_points_per_item: usize,
}

impl TrainConfig {
    pub fn defaults(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 30,
            lr: 1e-3,
            alpha: 1.0,
            beta: 0.1,
            margin: 0.2,
            k_joint: 5,
            phase1_epochs: 5,
            phase2_epochs: 20,
            batch_size: 32,
            seed,
            dims: Dims::default(),
            collocation_per_item: 128,
            data_points_per_item: 200,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phase1_epochs + self.phase2_epochs > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "phase1 ({}) + phase2 ({}) exceed epochs ({})",
                self.phase1_epochs, self.phase2_epochs, self.epochs
            )));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.k_joint == 0 {
            return Err(TrainError::BadConfig("k_joint must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    I,
    II,
    Joint,
    Baseline,
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseTag::I => "I",
            PhaseTag::II => "II",
            PhaseTag::Joint => "joint",
            PhaseTag::Baseline => "baseline",
        })
    }
}

/// Alternating-optimisation schedule: metric-only epochs, then frozen-encoder
/// physics epochs, then an interleave window where every k-th batch is a
/// joint update and the rest continue generator-only.
pub fn schedule_phase(epoch: usize, batch_idx: usize, cfg: &TrainConfig) -> PhaseTag {
    if epoch < cfg.phase1_epochs {
        PhaseTag::I
    } else if epoch < cfg.phase1_epochs + cfg.phase2_epochs {
        PhaseTag::II
    } else if batch_idx % cfg.k_joint == cfg.k_joint - 1 {
        PhaseTag::Joint
    } else {
        PhaseTag::II
    }
}

/// One record per applied optimiser update.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub phase: PhaseTag,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub fn steplog_csv(logs: &[StepLog]) -> String {
    let mut out =
        String::from("step,epoch,phase,loss_data,loss_physics,loss_metric,loss_total,grad_norm,wall_ms\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3}",
            l.step,
            l.epoch,
            l.phase,
            crate::sim::fmt_f64(l.loss.data),
            crate::sim::fmt_f64(l.loss.physics),
            crate::sim::fmt_f64(l.loss.metric),
            crate::sim::fmt_f64(l.loss.total),
            crate::sim::fmt_f64(l.grad_norm),
            l.wall_ms
        );
    }
    out
}

/// Everything a finished run leaves behind in memory.
pub struct TrainOutput {
    pub params: ModelParams,
    pub logs: Vec<StepLog>,
    pub degenerate_batches: usize,
}

/// Supervision material for one training trajectory.
pub(crate) struct TrainItem {
    pub window: ObservationWindow,
    pub f0: f64,
    pub data_ts: Vec<f64>,
    pub data_xs: Vec<f64>,
    pub data_vs: Vec<f64>,
}

pub(crate) fn build_train_items(
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<TrainItem>, TrainError> {
    let stride_n = cfg.data_points_per_item;
    let mut items = Vec::new();
    for traj in dataset.iter_split(Split::Train) {
        let window = ObservationWindow::from_trajectory(traj, cfg.dims.window_len)?;
        let n = traj.len();
        let stride = (n / stride_n).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).take(stride_n).collect();
        items.push(TrainItem {
            f0: traj.f0,
            window,
            data_ts: idx.iter().map(|&i| traj.times[i]).collect(),
            data_xs: idx.iter().map(|&i| traj.states[i].x).collect(),
            data_vs: idx.iter().map(|&i| traj.states[i].v).collect(),
        });
    }
    if items.is_empty() {
        return Err(TrainError::BadConfig("train split is empty".into()));
    }
    Ok(items)
}

/// Regime-stratified batches: shuffle each regime's items, interleave
/// round-robin, chunk. Every batch mixes regimes so triplets exist.
pub(crate) fn make_batches(
    items: &[TrainItem],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let key = item.f0.to_bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    for (_, g) in groups.iter_mut() {
        for i in (1..g.len()).rev() {
            let j = Uniform::new_inclusive(0, i).sample(rng);
            g.swap(i, j);
        }
    }
    let mut interleaved = Vec::with_capacity(items.len());
    let longest = groups.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    for k in 0..longest {
        for (_, g) in &groups {
            if k < g.len() {
                interleaved.push(g[k]);
            }
        }
    }
    interleaved.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn phase_for(method: Method, epoch: usize, batch_idx: usize, cfg: &TrainConfig) -> PhaseTag {
    match method {
        Method::TapinnAo => schedule_phase(epoch, batch_idx, cfg),
        Method::TapinnJoint => PhaseTag::Joint,
        _ => PhaseTag::Baseline,
    }
}

/// Train any method; writes steplog and checkpoints into `out_dir` when
/// given. Fully deterministic in (cfg, dataset): all randomness flows from
/// `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    match cfg.method {
        Method::TapinnAo | Method::TapinnJoint => train_tapinn(cfg, dataset, out_dir),
        _ => train_baseline(cfg, dataset, out_dir),
    }
}

/// Phased (tapinn_ao) or fully joint (tapinn_joint) encoder+generator run.
pub fn train_tapinn(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    if !matches!(cfg.method, Method::TapinnAo | Method::TapinnJoint) {
        return Err(TrainError::BadConfig(format!(
            "train_tapinn got method {}",
            cfg.method
        )));
    }
    run_loop(cfg, dataset, out_dir)
}

/// Parametric, hypernetwork, or multi-output Sobolev baseline run.
pub fn train_baseline(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    if !matches!(cfg.method, Method::Parametric | Method::Hyperpinn | Method::MultiOutput) {
        return Err(TrainError::BadConfig(format!(
            "train_baseline got method {}",
            cfg.method
        )));
    }
    run_loop(cfg, dataset, out_dir)
}

fn snapshot(
    params: &ModelParams,
    seed: u64,
    out_dir: Option<&Path>,
    label: &str,
) -> Result<(), TrainError> {
    if let Some(dir) = out_dir {
        save_checkpoint(params, Some(seed), &dir.join("checkpoints").join(format!("model_{label}")))?;
    }
    Ok(())
}

fn run_loop(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    let mut params = init_params(cfg.method.model_kind(), cfg.seed, &cfg.dims);
    let items = build_train_items(dataset, cfg)?;
    let duffing = dataset.config.params;
    let t_max = dataset.config.t_max();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    // Separate optimiser state per phase mask; a mask's moments advance only
    // when that mask trains.
    let enc_mask = params.arrays_with_prefix("enc.");
    let gen_mask = params.arrays_with_prefix("gen.");
    let all_mask: Vec<usize> = (0..params.arrays.len()).collect();
    let mut opt_enc = AdamState::new(&params);
    let mut opt_gen = AdamState::new(&params);

    let mut ctx = steps::StepContext::new(cfg, duffing, t_max);
    let mut logs: Vec<StepLog> = Vec::new();
    let mut degenerate_batches = 0usize;
    let mut step: u64 = 0;
    let mut last_good = params.clone();

    for epoch in 0..cfg.epochs {
        let batches = make_batches(&items, cfg.batch_size, &mut rng);
        for (batch_idx, batch) in batches.iter().enumerate() {
            let phase = phase_for(cfg.method, epoch, batch_idx, cfg);
            let t0 = Instant::now();
            let out = ctx.compute_step(&params, &items, batch, phase, &mut rng)?;
            if out.degenerate {
                degenerate_batches += 1;
            }
            if out.skip_update {
                // Metric-only step with no valid triplet: nothing to optimise.
                continue;
            }
            let grad_norm = out.grads.l2_norm();
            let diverged = !out.loss.total.is_finite()
                || out.loss.total > 1e6
                || !grad_norm.is_finite();
            if diverged {
                snapshot(&last_good, cfg.seed, out_dir, "lastgood")?;
                if let Some(dir) = out_dir {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("steplog.csv"), steplog_csv(&logs))?;
                }
                return Err(TrainError::Diverged {
                    method: cfg.method,
                    seed: cfg.seed,
                    step,
                    what: format!("total {} grad norm {grad_norm}", out.loss.total),
                });
            }
            match (cfg.method, phase) {
                (Method::TapinnAo, PhaseTag::I) => {
                    adam_step(&mut params, &out.grads, &mut opt_enc, cfg.lr, &enc_mask)
                }
                (Method::TapinnAo, PhaseTag::II) => {
                    adam_step(&mut params, &out.grads, &mut opt_gen, cfg.lr, &gen_mask)
                }
                (Method::TapinnAo | Method::TapinnJoint, PhaseTag::Joint) => {
                    adam_step(&mut params, &out.grads, &mut opt_enc, cfg.lr, &enc_mask);
                    adam_step(&mut params, &out.grads, &mut opt_gen, cfg.lr, &gen_mask);
                }
                _ => adam_step(&mut params, &out.grads, &mut opt_enc, cfg.lr, &all_mask),
            }
            if !params.all_finite() {
                return Err(TrainError::Diverged {
                    method: cfg.method,
                    seed: cfg.seed,
                    step,
                    what: "non-finite parameter after update".into(),
                });
            }
            last_good.arrays.clone_from(&params.arrays);
            logs.push(StepLog {
                step,
                epoch,
                phase,
                loss: out.loss,
                grad_norm,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        if cfg.method == Method::TapinnAo {
            if epoch + 1 == cfg.phase1_epochs {
                snapshot(&params, cfg.seed, out_dir, "phase1")?;
            }
            if epoch + 1 == cfg.phase1_epochs + cfg.phase2_epochs {
                snapshot(&params, cfg.seed, out_dir, "phase2")?;
            }
        }
    }
    snapshot(&params, cfg.seed, out_dir, "final")?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("steplog.csv"), steplog_csv(&logs))?;
        let meta = serde_json::json!({
            "method": cfg.method,
            "seed": cfg.seed,
            "config": cfg,
            "param_count": crate::neural::param_count(&params),
            "steps": logs.len(),
            "degenerate_batches": degenerate_batches,
        });
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    }
    Ok(TrainOutput { params, logs, degenerate_batches })
}
