//! Interactive views of the benchmark's ground-truth system for the browser:
//! trajectory simulation, stroboscopic Poincaré sections, and a bifurcation
//! sweep over the forcing amplitude.
//!
//! The `*_json` exports wrap plain Rust functions (tested natively) and
//! return JSON strings for the static page in `www/`.

use serde::Serialize;
use tapinn::sim::{
    regime_oracle, simulate_trajectory, DuffingParams, OracleOptions, Regime, SimError,
};
use wasm_bindgen::prelude::wasm_bindgen;

#[derive(Serialize)]
pub struct TrajectoryView {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Serialize)]
pub struct SectionView {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub classification: String,
}

#[derive(Serialize)]
pub struct SweepView {
    pub f0: Vec<f64>,
    pub x: Vec<f64>,
}

fn params(f0: f64) -> DuffingParams {
    DuffingParams::benchmark(f0)
}

/// Integrate one trajectory; at most ~200k steps to keep the page snappy.
pub fn simulate(f0: f64, x0: f64, v0: f64, t_end: f64, dt: f64) -> Result<TrajectoryView, SimError> {
    let n = ((t_end / dt).round() as usize).clamp(1, 200_000);
    let traj = simulate_trajectory(f0, x0, v0, n, dt, &params(f0))?;
    Ok(TrajectoryView {
        t: traj.times.clone(),
        x: traj.states.iter().map(|s| s.x).collect(),
        v: traj.states.iter().map(|s| s.v).collect(),
    })
}

/// Post-transient stroboscopic section points plus the regime label.
pub fn poincare_section(
    f0: f64,
    x0: f64,
    v0: f64,
    n_periods: usize,
    discard: usize,
) -> Result<SectionView, SimError> {
    let p = params(f0);
    let n_periods = n_periods.clamp(discard + 20, 2_000);
    let dt = 0.01;
    let n_steps = (n_periods as f64 * p.forcing_period() / dt).ceil() as usize;
    let traj = simulate_trajectory(f0, x0, v0, n_steps, dt, &p)?;
    let opts = OracleOptions { discard_periods: discard, ..OracleOptions::default() };
    let class = match regime_oracle(&traj, &p, &opts)? {
        Regime::Periodic(k) => format!("period-{k}"),
        Regime::Chaotic => "chaotic".to_string(),
    };

    // re-sample the section for display (same stroboscopic times)
    let period = p.forcing_period();
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    let total = (traj.times.last().unwrap() / period).floor() as usize;
    for k in (discard + 1)..=total {
        let t = k as f64 * period;
        let idx = ((t / dt) as usize).min(traj.len() - 2);
        let frac = (t - traj.times[idx]) / dt;
        let a = traj.states[idx];
        let b = traj.states[idx + 1];
        xs.push(a.x + frac * (b.x - a.x));
        vs.push(a.v + frac * (b.v - a.v));
    }
    Ok(SectionView { x: xs, v: vs, classification: class })
}

/// Section x-coordinates for a grid of forcing amplitudes: the classic
/// bifurcation diagram of the sweep the benchmark regimes live on.
pub fn bifurcation_sweep(
    f0_min: f64,
    f0_max: f64,
    n_values: usize,
    keep_periods: usize,
    discard: usize,
) -> Result<SweepView, SimError> {
    let n_values = n_values.clamp(2, 400);
    let keep = keep_periods.clamp(1, 200);
    let mut out = SweepView { f0: Vec::new(), x: Vec::new() };
    for i in 0..n_values {
        let f0 = f0_min + (f0_max - f0_min) * i as f64 / (n_values - 1) as f64;
        let p = params(f0);
        let period = p.forcing_period();
        let dt = period / 200.0;
        let n_steps = (discard + keep) * 200;
        let mut s = tapinn::sim::State { x: 0.1, v: 0.0 };
        let mut t = 0.0;
        for step in 0..n_steps {
            s = tapinn::sim::rk4_step(s, t, dt, &p)?;
            t = (step + 1) as f64 * dt;
            if step >= discard * 200 && (step + 1) % 200 == 0 {
                out.f0.push(f0);
                out.x.push(s.x);
            }
        }
    }
    Ok(out)
}

fn to_json<T: Serialize>(value: Result<T, SimError>) -> String {
    match value {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::to_string(&serde_json::json!({ "error": msg })).unwrap()
}

#[wasm_bindgen]
pub fn simulate_json(f0: f64, x0: f64, v0: f64, t_end: f64, dt: f64) -> String {
    to_json(simulate(f0, x0, v0, t_end, dt))
}

#[wasm_bindgen]
pub fn poincare_json(f0: f64, x0: f64, v0: f64, n_periods: usize, discard: usize) -> String {
    to_json(poincare_section(f0, x0, v0, n_periods, discard))
}

#[wasm_bindgen]
pub fn bifurcation_json(
    f0_min: f64,
    f0_max: f64,
    n_values: usize,
    keep_periods: usize,
    discard: usize,
) -> String {
    to_json(bifurcation_sweep(f0_min, f0_max, n_values, keep_periods, discard))
}
