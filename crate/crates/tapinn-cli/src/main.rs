//! Experiment driver: `generate` the dataset, `train` any method, `evaluate`
//! a finished run, `compare` runs into the summary table, and
//! `dump-defaults` to print a complete config file.
//!
//! Exit codes: 0 ok, 2 usage/config error, 3 numerical divergence.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tapinn::config::ExperimentConfig;
use tapinn::evaluation::{
    evaluate_run, export_embeddings, parse_steplog_csv, render_comparison, reports_csv, EvalReport,
};
use tapinn::neural::load_checkpoint;
use tapinn::sim::{
    generate_dataset, regime_oracle, simulate_trajectory, Dataset, OracleOptions, Regime, Split,
};
use tapinn::training::{train, Method, TrainError};

#[derive(Parser)]
#[command(name = "tapinn", about = "Topology-aware PINN benchmark on the Duffing oscillator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the dataset, validate regimes, and write CSVs + manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method (or `all`) for one or more seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// tapinn_ao | tapinn_joint | parametric | hyperpinn | multi_output | all
        #[arg(long)]
        method: String,
        /// Single seed; overrides the config value.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated list, e.g. 0,1,2 (used with --method all or alone).
        #[arg(long)]
        seeds: Option<String>,
        /// Dataset directory; overrides train.dataset_dir.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce eval_report.json (and embeddings for encoder models) for one run.
    Evaluate {
        #[arg(long = "run-dir")]
        run_dir: PathBuf,
        /// Dataset directory; defaults to the config stored in run.json.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Aggregate eval reports under a directory into a CSV and summary table.
    Compare {
        #[arg(long = "runs-dir")]
        runs_dir: PathBuf,
    },
    /// Print every config key with its default value.
    DumpDefaults,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<TrainError>() {
                Some(TrainError::Diverged { .. }) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

type AnyError = Box<dyn std::error::Error + Send + Sync>;

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::Generate { config, seed, out } => cmd_generate(&config, seed, &out),
        Command::Train { config, method, seed, seeds, data, out } => {
            cmd_train(&config, &method, seed, seeds.as_deref(), data.as_deref(), &out)
        }
        Command::Evaluate { run_dir, data } => cmd_evaluate(&run_dir, data.as_deref()),
        Command::Compare { runs_dir } => cmd_compare(&runs_dir),
        Command::DumpDefaults => {
            print!("{}", ExperimentConfig::default().dump());
            Ok(())
        }
    }
}

fn cmd_generate(config: &Path, seed: u64, out: &Path) -> Result<(), AnyError> {
    let cfg = ExperimentConfig::load(config)?;
    let dataset = generate_dataset(&cfg.dataset, seed)?;
    dataset.write(out)?;
    println!(
        "wrote {} trajectories ({} train / {} test) to {}",
        dataset.trajectories.len(),
        dataset.count(Split::Train),
        dataset.count(Split::Test),
        out.display()
    );

    // Long-run oracle validation of the chosen ODE constants.
    let p = cfg.dataset.params;
    let opts = OracleOptions::default();
    let periods = opts.discard_periods + 140;
    let n_steps = (periods as f64 * p.forcing_period() / cfg.dataset.dt).ceil() as usize;
    let mut classes = Vec::new();
    for &f0 in &cfg.dataset.regimes {
        let traj = simulate_trajectory(f0, 0.1, 0.0, n_steps, cfg.dataset.dt, &p)?;
        let class = regime_oracle(&traj, &p.with_f0(f0), &opts)?;
        println!("regime f0={f0}: {class:?}");
        classes.push((f0, class));
    }
    classes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let low_periodic = matches!(classes.first(), Some((_, Regime::Periodic(_))));
    let high_chaotic = matches!(classes.last(), Some((_, Regime::Chaotic)));
    if !(low_periodic && high_chaotic) {
        println!(
            "WARNING: regime separation check failed (lowest f0 should be periodic, highest chaotic); \
             adjust dataset.delta/omega before benchmarking"
        );
    }
    Ok(())
}

fn parse_seeds(seed: Option<u64>, seeds: Option<&str>, cfg_seed: u64) -> Result<Vec<u64>, AnyError> {
    if let Some(list) = seeds {
        let parsed: Result<Vec<u64>, _> = list.split(',').map(|s| s.trim().parse()).collect();
        return Ok(parsed.map_err(|e| format!("bad --seeds list {list:?}: {e}"))?);
    }
    Ok(vec![seed.unwrap_or(cfg_seed)])
}

fn cmd_train(
    config: &Path,
    method: &str,
    seed: Option<u64>,
    seeds: Option<&str>,
    data: Option<&Path>,
    out: &Path,
) -> Result<(), AnyError> {
    let cfg = ExperimentConfig::load(config)?;
    let methods: Vec<Method> = if method == "all" {
        Method::ALL.to_vec()
    } else {
        vec![method.parse::<Method>()?]
    };
    let seeds = parse_seeds(seed, seeds, cfg.train.seed)?;

    let data_dir = data
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.dataset_dir));
    let dataset = Dataset::load(&data_dir)?;

    let fan_out = methods.len() * seeds.len() > 1;
    for m in &methods {
        for &s in &seeds {
            let mut tcfg = cfg.train.clone();
            tcfg.method = *m;
            tcfg.seed = s;
            let run_dir = if fan_out {
                out.join(format!("{}_seed{}", m.as_str(), s))
            } else {
                out.to_path_buf()
            };
            let started = std::time::Instant::now();
            let result = train(&tcfg, &dataset, Some(&run_dir))?;
            println!(
                "{} seed {s}: {} steps in {:.1}s, final total loss {:.4} -> {}",
                m.as_str(),
                result.logs.len(),
                started.elapsed().as_secs_f64(),
                result.logs.last().map(|l| l.loss.total).unwrap_or(f64::NAN),
                run_dir.display()
            );
        }
    }
    Ok(())
}

fn cmd_evaluate(run_dir: &Path, data: Option<&Path>) -> Result<(), AnyError> {
    let run_meta_path = run_dir.join("run.json");
    let ckpt = run_dir.join("checkpoints").join("model_final");
    if !run_meta_path.exists() || !ckpt.with_extension("bin").exists() {
        return Err(format!(
            "run directory {} is missing run.json or checkpoints/model_final",
            run_dir.display()
        )
        .into());
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&run_meta_path)?)?;
    let method: Method = meta["method"]
        .as_str()
        .ok_or("run.json missing method")?
        .parse()?;
    let seed = meta["seed"].as_u64().ok_or("run.json missing seed")?;

    // eval settings: defaults plus environment overrides; dataset dir from
    // the flag or the recorded config
    let mut env_cfg = ExperimentConfig::default();
    env_cfg.apply_env()?;
    let eval = env_cfg.eval;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(
            meta["config"]["dataset_dir"].as_str().unwrap_or("data"),
        ),
    };
    let dataset = Dataset::load(&data_dir)?;
    let params = load_checkpoint(&ckpt)?;
    let logs = parse_steplog_csv(&std::fs::read_to_string(run_dir.join("steplog.csv"))?)?;

    let report = evaluate_run(
        &params,
        &dataset,
        &logs,
        method,
        seed,
        eval.n_collocation,
        eval.seed,
    )?;
    std::fs::write(
        run_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if matches!(
        params.kind,
        tapinn::neural::ModelKind::Tapinn | tapinn::neural::ModelKind::MultiOutput
    ) {
        export_embeddings(&params, &dataset, Split::Test, &run_dir.join("embeddings_test.csv"))?;
    }
    println!(
        "{method} seed {seed}: physics_residual {:.4}, data_mse {:.4}, params {}{}",
        report.physics_residual,
        report.data_mse,
        report.param_count,
        report
            .probe_mse
            .map(|p| format!(", probe_mse {p:.3e}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_compare(runs_dir: &Path) -> Result<(), AnyError> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for entry in std::fs::read_dir(runs_dir)? {
        let path = entry?.path().join("eval_report.json");
        if path.exists() {
            reports.push(serde_json::from_str(&std::fs::read_to_string(&path)?)?);
        }
    }
    if reports.is_empty() {
        return Err(format!("no eval_report.json found under {}", runs_dir.display()).into());
    }
    reports.sort_by_key(|r| (r.method.as_str(), r.seed));
    std::fs::write(runs_dir.join("compare.csv"), reports_csv(&reports))?;
    print!("{}", render_comparison(&reports));
    println!("\naggregate written to {}", runs_dir.join("compare.csv").display());
    Ok(())
}
