//! Test Dice as the labeled share of the training set grows, with and
//! without the unlabeled images.
//!
//! ```text
//! cargo run --release --example labeled_ratio_sweep
//! ```

use semiseg::data::{split, synthesize, SplitSpec, SyntheticSpec};
use semiseg::optim::OptimConfig;
use semiseg::trainer::{evaluate, train, TrainConfig};
use semiseg::{ArchConfig, FusionMode, Result};

fn main() -> Result<()> {
    let arch = ArchConfig {
        stage_widths: [8, 16, 32, 64, 64],
        input_size: 32,
        ..ArchConfig::toy()
    };
    let spec = SyntheticSpec::new(32);
    let samples: Vec<_> = (0..200).map(|i| synthesize(&spec, 100, i)).collect();
    let semi = TrainConfig {
        epochs: 20,
        optim: OptimConfig {
            init_lr: 0.03,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut supervised = semi.clone();
    supervised.unlabeled_batch = 0;
    supervised.loss.lambda_inp = 0.0;

    println!("{:>6} {:>9} {:>12} {:>16}", "ratio", "labeled", "semi Dice", "labeled-only Dice");
    for ratio in [0.1, 0.2, 0.5, 1.0] {
        let data = split(&samples, &SplitSpec { labeled_ratio: ratio, ..SplitSpec::default() })?;
        let mut dice = Vec::new();
        for cfg in [&semi, &supervised] {
            let mut params = train(&arch, FusionMode::Gff, cfg, &data, None, |_| {})?.best.params;
            dice.push(100.0 * evaluate(&mut params, &data.test, &cfg.binarize)?.mean.dice);
        }
        println!("{ratio:>6.2} {:>9} {:>12.2} {:>16.2}", data.labeled.len(), dice[0], dice[1]);
    }
    Ok(())
}
