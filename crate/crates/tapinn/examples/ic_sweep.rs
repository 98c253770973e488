// How the initial-condition spread affects phase-I clustering in 190 steps.
use tapinn::evaluation::{linear_probe, separation_statistic, split_embeddings};
use tapinn::sim::{generate_dataset, DatasetConfig, Split};
use tapinn::training::{train, Method, TrainConfig};

fn main() {
    for (xr, vr) in [(1.0, 0.5), (0.5, 0.25), (0.25, 0.12), (0.1, 0.05)] {
        let ds_cfg = DatasetConfig {
            x0_range: (-xr, xr),
            v0_range: (-vr, vr),
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&ds_cfg, 42).unwrap();
        let mut cfg = TrainConfig::defaults(Method::TapinnAo, 0);
        cfg.epochs = 5;
        cfg.phase1_epochs = 5;
        cfg.phase2_epochs = 0;
        let out = train(&cfg, &ds, None).unwrap();
        let (_, labels, zs) = split_embeddings(&out.params, &ds, Split::Test).unwrap();
        let probe = linear_probe(&zs, &labels).unwrap();
        let sep = separation_statistic(&zs, &labels);
        let m_last = out.logs.last().unwrap().loss.metric;
        println!(
            "x0 +-{xr:<5} v0 +-{vr:<5}: metric end {m_last:.4}, probe {probe:.3e}, separation {sep:.2}"
        );
    }
}
