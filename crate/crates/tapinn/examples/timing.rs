// timing probe: full-scale step costs per method
use tapinn::sim::{generate_dataset, DatasetConfig};
use tapinn::training::{train, Method, TrainConfig};

fn main() {
    let ds_cfg = DatasetConfig { per_regime: 40, ..DatasetConfig::default() };
    let t0 = std::time::Instant::now();
    let ds = generate_dataset(&ds_cfg, 0).unwrap();
    println!("dataset 120 trajs: {:.2}s", t0.elapsed().as_secs_f64());

    for method in [Method::TapinnAo, Method::TapinnJoint, Method::Parametric, Method::Hyperpinn, Method::MultiOutput] {
        let mut cfg = TrainConfig::defaults(method, 0);
        cfg.epochs = 2;
        cfg.phase1_epochs = 1;
        cfg.phase2_epochs = 1;
        let t0 = std::time::Instant::now();
        let out = train(&cfg, &ds, None).unwrap();
        let total = t0.elapsed().as_secs_f64();
        let by_phase: Vec<String> = ["I", "II", "joint", "baseline"].iter().filter_map(|tag| {
            let v: Vec<f64> = out.logs.iter().filter(|l| l.phase.to_string() == *tag).map(|l| l.wall_ms).collect();
            if v.is_empty() { None } else {
                Some(format!("{}: {:.0}ms avg ({} steps)", tag, v.iter().sum::<f64>() / v.len() as f64, v.len()))
            }
        }).collect();
        println!("{method}: {total:.1}s for 2 epochs; {}", by_phase.join(", "));
    }
}
