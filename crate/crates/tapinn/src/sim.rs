//! Duffing-oscillator dataset generation.
//!
//! Ground truth is the forced, damped Duffing equation
//! `x'' + delta·x' + alpha·x + beta·x^3 = f0·cos(omega·t)`, integrated with
//! fixed-step classical RK4. Three forcing amplitudes form the regimes of the
//! benchmark; a Poincaré-section oracle validates that the chosen constants
//! actually sweep from period-1 to chaos before any training run uses them.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("non-finite state at t={t} (f0={f0}, x0={x0}, v0={v0})")]
    NonFinite { t: f64, f0: f64, x0: f64, v0: f64 },
    #[error("trajectory too short for a section estimate: {have} usable forcing periods, need {need}")]
    TooShort { have: usize, need: usize },
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse: {0}")]
    Parse(String),
}

/// ODE constants. `f0` is the forcing amplitude that defines a regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub f0: f64,
}

impl DuffingParams {
    /// Benchmark constants. The double-well potential (alpha < 0, beta > 0)
    /// with this damping/frequency pair puts f0 = 0.3 on a period-1 orbit,
    /// f0 = 0.5 on period-2 and f0 = 0.8 in chaos, which is the sweep the
    /// regime oracle checks for.
    pub fn benchmark(f0: f64) -> Self {
        DuffingParams {
            delta: 0.3,
            alpha: -1.0,
            beta: 1.0,
            omega: 1.4,
            f0,
        }
    }

    pub fn with_f0(self, f0: f64) -> Self {
        DuffingParams { f0, ..self }
    }

    /// Forcing period 2π/omega.
    pub fn forcing_period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.delta >= 0.0 && self.omega > 0.0 && self.f0 >= 0.0) {
            return Err(SimError::BadConfig(format!(
                "need delta >= 0, omega > 0, f0 >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub x: f64,
    pub v: f64,
}

impl State {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite()
    }
}

/// One simulated run: uniform time grid plus (x, v) samples, tagged with the
/// forcing amplitude that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub traj_id: u64,
    pub f0: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Displacement samples only.
    pub fn xs(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(|s| s.x)
    }
}

/// Right-hand side of the first-order system: returns (dx/dt, dv/dt).
pub fn duffing_rhs(s: State, t: f64, p: &DuffingParams) -> State {
    State {
        x: s.v,
        v: -p.delta * s.v - p.alpha * s.x - p.beta * s.x * s.x * s.x
            + p.f0 * (p.omega * t).cos(),
    }
}

/// Classical RK4 update from `t` to `t + dt`.
pub fn rk4_step(s: State, t: f64, dt: f64, p: &DuffingParams) -> Result<State, SimError> {
    let half = 0.5 * dt;
    let k1 = duffing_rhs(s, t, p);
    let k2 = duffing_rhs(
        State { x: s.x + half * k1.x, v: s.v + half * k1.v },
        t + half,
        p,
    );
    let k3 = duffing_rhs(
        State { x: s.x + half * k2.x, v: s.v + half * k2.v },
        t + half,
        p,
    );
    let k4 = duffing_rhs(
        State { x: s.x + dt * k3.x, v: s.v + dt * k3.v },
        t + dt,
        p,
    );
    let next = State {
        x: s.x + dt / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
        v: s.v + dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
    };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(SimError::NonFinite { t, f0: p.f0, x0: s.x, v0: s.v })
    }
}

/// Integrate `n_steps` RK4 steps from (x0, v0); the result holds
/// `n_steps + 1` samples with `times[i] = i*dt`.
pub fn simulate_trajectory(
    f0: f64,
    x0: f64,
    v0: f64,
    n_steps: usize,
    dt: f64,
    p_base: &DuffingParams,
) -> Result<Trajectory, SimError> {
    let p = p_base.with_f0(f0);
    let mut s = State { x: x0, v: v0 };
    if !s.is_finite() {
        return Err(SimError::NonFinite { t: 0.0, f0, x0, v0 });
    }
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(s);
    for i in 0..n_steps {
        let t = i as f64 * dt;
        s = rk4_step(s, t, dt, &p).map_err(|_| SimError::NonFinite { t, f0, x0, v0 })?;
        times.push((i + 1) as f64 * dt);
        states.push(s);
    }
    Ok(Trajectory { traj_id: 0, f0, dt, times, states })
}

/// Hamiltonian of the unforced, undamped system; conserved when
/// `delta = 0` and `f0 = 0`.
pub fn energy(s: State, p: &DuffingParams) -> f64 {
    0.5 * s.v * s.v + 0.5 * p.alpha * s.x * s.x + 0.25 * p.beta * s.x.powi(4)
}

// ---------------------------------------------------------------------------
// Regime oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Period-k orbit: k distinct stroboscopic section points.
    Periodic(usize),
    Chaotic,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Forcing periods dropped before sampling the section.
    pub discard_periods: usize,
    /// Minimum usable periods after the discard.
    pub min_periods: usize,
    /// Euclidean clustering tolerance in (x, v).
    pub cluster_tol: f64,
    /// More distinct section points than this is reported as chaos.
    pub chaos_threshold: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            discard_periods: 120,
            min_periods: 20,
            cluster_tol: 0.02,
            chaos_threshold: 8,
        }
    }
}

/// Stroboscopic Poincaré classification of a long trajectory.
///
/// Samples (x, v) at multiples of the forcing period (linear interpolation on
/// the stored grid), clusters the post-transient points, and maps the cluster
/// count to period-k or chaos.
pub fn regime_oracle(
    traj: &Trajectory,
    p: &DuffingParams,
    opts: &OracleOptions,
) -> Result<Regime, SimError> {
    let period = p.forcing_period();
    let t_max = *traj.times.last().unwrap_or(&0.0);
    let total_periods = (t_max / period).floor() as usize;
    let usable = total_periods.saturating_sub(opts.discard_periods);
    if usable < opts.min_periods {
        return Err(SimError::TooShort { have: usable, need: opts.min_periods });
    }

    let mut pts: Vec<State> = Vec::with_capacity(usable);
    for n in (opts.discard_periods + 1)..=total_periods {
        let t = n as f64 * period;
        pts.push(interp_state(traj, t));
    }

    let mut clusters: Vec<State> = Vec::new();
    'outer: for s in &pts {
        for c in &clusters {
            if (s.x - c.x).hypot(s.v - c.v) < opts.cluster_tol {
                continue 'outer;
            }
        }
        clusters.push(*s);
    }

    if clusters.len() > opts.chaos_threshold {
        Ok(Regime::Chaotic)
    } else {
        Ok(Regime::Periodic(clusters.len()))
    }
}

fn interp_state(traj: &Trajectory, t: f64) -> State {
    let dt = traj.dt;
    let idx = ((t / dt).floor() as usize).min(traj.len().saturating_sub(2));
    let frac = (t - traj.times[idx]) / dt;
    let a = traj.states[idx];
    let b = traj.states[idx + 1];
    State {
        x: a.x + frac * (b.x - a.x),
        v: a.v + frac * (b.v - a.v),
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Generation protocol: regimes, counts, grid, and initial-condition ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub params: DuffingParams,
    pub regimes: Vec<f64>,
    pub per_regime: usize,
    pub samples_per_trajectory: usize,
    pub dt: f64,
    pub x0_range: (f64, f64),
    pub v0_range: (f64, f64),
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            params: DuffingParams::benchmark(0.0),
            regimes: vec![0.3, 0.5, 0.8],
            per_regime: 500,
            samples_per_trajectory: 1000,
            dt: 0.01,
            x0_range: (-0.5, 0.5),
            v0_range: (-0.25, 0.25),
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    /// Collocation horizon: the time span covered by a stored trajectory.
    pub fn t_max(&self) -> f64 {
        self.samples_per_trajectory as f64 * self.dt
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    /// Parallel to `trajectories`.
    pub splits: Vec<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    config: DatasetConfig,
    seed: u64,
    n_train: usize,
    n_test: usize,
    /// traj_id -> split, recorded so a reload does not depend on file order.
    split: BTreeMap<u64, Split>,
}

impl Dataset {
    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = &Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(t, _)| t)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }
}

/// Simulate `per_regime` trajectories for every regime and assign a
/// seed-deterministic stratified train/test split.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset, SimError> {
    cfg.params.validate()?;
    if cfg.regimes.is_empty() || cfg.per_regime == 0 {
        return Err(SimError::BadConfig(
            "need a nonempty regime list and per_regime >= 1".into(),
        ));
    }
    if cfg.samples_per_trajectory == 0 {
        return Err(SimError::BadConfig("samples_per_trajectory must be >= 1".into()));
    }

    let mut ic_rng = ChaCha8Rng::seed_from_u64(seed);
    let ux = Uniform::new_inclusive(cfg.x0_range.0, cfg.x0_range.1);
    let uv = Uniform::new_inclusive(cfg.v0_range.0, cfg.v0_range.1);

    let mut trajectories = Vec::with_capacity(cfg.regimes.len() * cfg.per_regime);
    let mut splits = Vec::with_capacity(trajectories.capacity());
    let mut traj_id = 0u64;
    for &f0 in &cfg.regimes {
        // Per-regime split: shuffle positions, first train_fraction go to train.
        let n_train = ((cfg.per_regime as f64) * cfg.train_fraction).round() as usize;
        let order = shuffled_indices(cfg.per_regime, &mut ic_rng);
        let mut split_of = vec![Split::Test; cfg.per_regime];
        for &pos in order.iter().take(n_train.max(usize::from(cfg.per_regime == 1))) {
            split_of[pos] = Split::Train;
        }
        for k in 0..cfg.per_regime {
            let x0 = ux.sample(&mut ic_rng);
            let v0 = uv.sample(&mut ic_rng);
            let mut traj = simulate_trajectory(
                f0,
                x0,
                v0,
                cfg.samples_per_trajectory - 1,
                cfg.dt,
                &cfg.params,
            )?;
            traj.traj_id = traj_id;
            trajectories.push(traj);
            splits.push(split_of[k]);
            traj_id += 1;
        }
    }
    Ok(Dataset { config: cfg.clone(), seed, trajectories, splits })
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates, explicit so the draw sequence is pinned by this crate.
    for i in (1..n).rev() {
        let j = Uniform::new_inclusive(0, i).sample(rng);
        idx.swap(i, j);
    }
    idx
}

// ---------------------------------------------------------------------------
// File format: one CSV per split plus a JSON manifest
// ---------------------------------------------------------------------------

/// 17-significant-digit float, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn render_split_csv(ds: &Dataset, split: Split) -> String {
    let mut out = String::from("traj_id,f0,step,t,x,v\n");
    for traj in ds.iter_split(split) {
        for (i, s) in traj.states.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                traj.traj_id,
                fmt_f64(traj.f0),
                i,
                fmt_f64(traj.times[i]),
                fmt_f64(s.x),
                fmt_f64(s.v)
            );
        }
    }
    out
}

impl Dataset {
    /// Write `train.csv`, `test.csv`, and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train.csv"), render_split_csv(self, Split::Train))?;
        std::fs::write(dir.join("test.csv"), render_split_csv(self, Split::Test))?;
        let manifest = DatasetManifest {
            config: self.config.clone(),
            seed: self.seed,
            n_train: self.count(Split::Train),
            n_test: self.count(Split::Test),
            split: self
                .trajectories
                .iter()
                .zip(&self.splits)
                .map(|(t, s)| (t.traj_id, *s))
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| SimError::Parse(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, SimError> {
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| SimError::Parse(format!("manifest.json: {e}")))?;
        let mut trajectories = Vec::new();
        let mut splits = Vec::new();
        for (name, split) in [("train.csv", Split::Train), ("test.csv", Split::Test)] {
            let text = std::fs::read_to_string(dir.join(name))?;
            for traj in parse_split_csv(&text, manifest.config.dt)? {
                let recorded = manifest.split.get(&traj.traj_id).copied().ok_or_else(|| {
                    SimError::Parse(format!("traj {} missing from manifest split", traj.traj_id))
                })?;
                if recorded != split {
                    return Err(SimError::Parse(format!(
                        "traj {} found in {name} but manifest says {recorded:?}",
                        traj.traj_id
                    )));
                }
                trajectories.push(traj);
                splits.push(split);
            }
        }
        // Stable order regardless of which file a trajectory came from.
        let mut order: Vec<usize> = (0..trajectories.len()).collect();
        order.sort_by_key(|&i| trajectories[i].traj_id);
        let trajectories: Vec<_> = order.iter().map(|&i| trajectories[i].clone()).collect();
        let splits: Vec<_> = order.iter().map(|&i| splits[i]).collect();
        Ok(Dataset { config: manifest.config, seed: manifest.seed, trajectories, splits })
    }
}

fn parse_split_csv(text: &str, dt: f64) -> Result<Vec<Trajectory>, SimError> {
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "traj_id,f0,step,t,x,v" {
                return Err(SimError::Parse(format!("unexpected header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = |what: &str| {
            cols.next()
                .ok_or_else(|| SimError::Parse(format!("line {}: missing {what}", lineno + 1)))
        };
        let traj_id: u64 = parse_num(next("traj_id")?, lineno)?;
        let f0: f64 = parse_num(next("f0")?, lineno)?;
        let step: usize = parse_num(next("step")?, lineno)?;
        let t: f64 = parse_num(next("t")?, lineno)?;
        let x: f64 = parse_num(next("x")?, lineno)?;
        let v: f64 = parse_num(next("v")?, lineno)?;

        if trajs.last().map(|tr| tr.traj_id) != Some(traj_id) {
            trajs.push(Trajectory { traj_id, f0, dt, times: Vec::new(), states: Vec::new() });
        }
        let traj = trajs.last_mut().unwrap();
        if traj.states.len() != step {
            return Err(SimError::Parse(format!(
                "traj {traj_id}: step {step} out of order at line {}",
                lineno + 1
            )));
        }
        traj.times.push(t);
        traj.states.push(State { x, v });
    }
    Ok(trajs)
}

fn parse_num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T, SimError> {
    s.parse()
        .map_err(|_| SimError::Parse(format!("line {}: bad number {s:?}", lineno + 2)))
}
