//! Trains on the first fragment of a synthetic room and prints the loss terms.
//!
//! `cargo run --release -p cdr-core --example overfit -- [steps] [seed] [KEY=VALUE...]`

use cdr_core::config::PipelineConfig;
use cdr_core::dataset::Dataset;
use cdr_core::generate::{synth_scene, write_synthetic};
use cdr_core::pipeline::init_params;
use cdr_core::train::{load_samples, occupied_tsdf_mae, train};

fn main() -> cdr_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = PipelineConfig::desk();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("KEY=VALUE");
        cfg.set(k, v)?;
    }
    let dir = std::env::temp_dir().join(format!("cdr_overfit_{seed}"));
    write_synthetic(&dir, &synth_scene(seed, &cfg)?, &cfg)?;
    let mut samples = load_samples(&Dataset::open(&dir)?, &cfg, 0)?;
    samples.truncate(1);
    let mut params = init_params(&cfg, seed);
    let reports = train(&mut params, &samples, &cfg, steps, |step, r, _| {
        if step % 25 == 0 || step + 1 == steps {
            let terms: Vec<String> = r.terms.iter().map(|(k, (v, _))| format!("{k}={v:.4}")).collect();
            println!("{step:4} total={:.4} {}", r.total, terms.join(" "));
        }
        Ok(())
    })?;
    let (a, b) = (reports[0].total, reports[reports.len() - 1].total);
    println!("drop {:.1}%", 100.0 * (1.0 - b / a));
    println!("occupied tsdf mae {:.4}", occupied_tsdf_mae(&params, &samples[0], &cfg)?);
    Ok(())
}
