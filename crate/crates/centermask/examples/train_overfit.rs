use centermask::data::synth_generate;
use centermask::pipeline::{train, Config};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);

    let mut cfg = Config::default();
    cfg.seed = 7;
    cfg.train.iterations = iters;
    cfg.train.learning_rate = lr;
    let records = synth_generate(1001, 8, (96, 96)).unwrap();
    println!("records: {}", records.len());
    let t = std::time::Instant::now();
    let dir = std::path::PathBuf::from("/tmp/overfit");
    let (_, report) = train(&cfg, &records, &dir.join("m.ckpt"), &dir.join("loss.csv")).unwrap();
    let el = t.elapsed();
    println!("trained {} iters in {:.2?} ({:.3} s/iter)", report.iterations, el, el.as_secs_f64() / iters as f64);
    println!("final: {:?}", report.final_losses);
}
