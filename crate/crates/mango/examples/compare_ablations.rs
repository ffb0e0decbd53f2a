//! Ablation grids: the full attention flow against baselines, and the
//! partitioning schemes against each other, each over three seeds with mean
//! and stddev per cell. This is a reduced-budget version of the `compare`
//! subcommand's variants/partitions grids.
//!
//! Run with `cargo run --release --example compare_ablations`.
//! Expect a few minutes of training.

use mango::cli::run_compare;
use mango::config::{CompareSection, ExperimentConfig, TrainSection};
use mango::data::DatasetName;

fn main() -> mango::Result<()> {
    let cfg = ExperimentConfig {
        dataset: DatasetName::CorrelatedGaussians,
        d_model: 4,
        n_tokens_per_modality: 4,
        blocks: 1,
        noise: None,
        compressor: None,
        train: TrainSection {
            steps: 800,
            batch_size: 8,
            lr: 0.01,
            seed: 0,
            weight_task: 0.0,
        },
        task: None,
        compare: Some(CompareSection {
            seeds: vec![0, 1, 2],
            grids: vec!["variants".into(), "partitions".into()],
        }),
    };
    let rows = run_compare(&cfg)?;
    println!("{:<12} {:<16} {:>8} {:>12} {:>12}", "grid", "cell", "seed", "nll/dim", "seconds");
    for r in &rows {
        println!(
            "{:<12} {:<16} {:>8} {:>12.4} {:>12.1}",
            r.grid, r.cell, r.seed, r.nll_per_dim, r.wallclock_s
        );
    }
    println!(
        "\nexpected ordering (means): mango <= glow_linear <= coupling_only, and\n\
         full stack <= mmca+imca <= mmca-only"
    );
    Ok(())
}
