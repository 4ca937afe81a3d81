//! Runs both pipelines on a config and prints end-of-run statistics.
//!
//! `cargo run --release --example sweep -- [config.toml] [seed...]`

use calibadv::simulator::{run_experiment, Pipeline, SimConfig};

fn main() -> calibadv::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = match args.next() {
        Some(p) if p.ends_with(".toml") => SimConfig::load(p)?,
        _ => SimConfig::default(),
    };
    let seeds: Vec<u64> = args.filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds };
    for seed in seeds {
        config.seed = seed;
        for pipeline in [Pipeline::Baseline, Pipeline::Calibadv] {
            config.pipeline = pipeline;
            let out = run_experiment(&config)?;
            let tail = &out.metrics[out.metrics.len() * 9 / 10..];
            let batch_success = tail.iter().map(|m| m.success_rate).sum::<f64>() / tail.len() as f64;
            println!(
                "seed {seed:>10} {pipeline:>9}: expected reward {:.4}  tail batch success {:.4}  garbage {:.5}  tag {:.4}  cum neg/pos {:.4}",
                out.final_expected_reward(),
                batch_success,
                out.final_garbage_mass(),
                out.policy.tag_prob(),
                out.cumulative_neg_pos_ratio().unwrap_or(f64::NAN),
            );
        }
    }
    Ok(())
}
