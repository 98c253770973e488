// Phase-I-only sweep: how many metric steps until the latent space clusters?
use tapinn::evaluation::{linear_probe, separation_statistic, split_embeddings};
use tapinn::sim::{Dataset, Split};
use tapinn::training::{train, Method, TrainConfig};

fn main() {
    let ds = Dataset::load(std::path::Path::new("/tmp/pilot/data")).unwrap();
    for (batch, epochs) in [(32usize, 5usize), (8, 5), (8, 20), (32, 30)] {
        let mut cfg = TrainConfig::defaults(Method::TapinnAo, 0);
        cfg.batch_size = batch;
        cfg.epochs = epochs;
        cfg.phase1_epochs = epochs; // metric-only run
        cfg.phase2_epochs = 0;
        let t0 = std::time::Instant::now();
        let out = train(&cfg, &ds, None).unwrap();
        let (_, labels, zs) = split_embeddings(&out.params, &ds, Split::Test).unwrap();
        let probe = linear_probe(&zs, &labels).unwrap();
        let sep = separation_statistic(&zs, &labels);
        let m_first = out.logs.first().unwrap().loss.metric;
        let m_last = out.logs.last().unwrap().loss.metric;
        println!(
            "batch {batch:>2} epochs {epochs:>2}: {} steps, metric {m_first:.4}->{m_last:.4}, probe {probe:.3e}, separation {sep:.2} ({:.0}s)",
            out.logs.len(), t0.elapsed().as_secs_f64()
        );
    }
}
