//! Trains on generated scenes and reports held-out Average Recall.
//!
//! Usage: `cargo run --release --example train_and_evaluate -- [iterations] [eval_scenes] [key=value ...]`

use std::time::Instant;

use ppotd::metrics::Split;
use ppotd::run::{evaluate, init_model, train, RunConfig};

fn main() -> ppotd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig {
        iterations: args.first().and_then(|s| s.parse().ok()).unwrap_or(300),
        ..RunConfig::default()
    };
    let scenes = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    cfg.validate()?;

    let (model, store) = init_model(&cfg)?;
    let base = evaluate(&cfg, &model, &store, scenes)?;
    println!("untrained overall AR {:.4}", base.report.ar(Split::Overall).unwrap_or(f64::NAN));

    let start = Instant::now();
    let every = (cfg.iterations / 10).max(1);
    let trained = train(&cfg, |row| {
        if row.step % every == 0 || row.step == 1 {
            println!(
                "step {:5}  total {:8.4}  phrase {:8.4}  object {:8.4}  pocl {:.4}  ({:.1}s)",
                row.step,
                row.total,
                row.phrase,
                row.object,
                row.pocl,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let summary = evaluate(&cfg, &trained.model, &trained.store, scenes)?;
    print!("{}", summary.report.table());
    println!("G margin {:.4}", summary.g_margin());
    Ok(())
}
