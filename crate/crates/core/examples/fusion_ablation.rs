//! Trains the same model with add, concat and gated fusion on one split and
//! compares test Dice.
//!
//! ```text
//! cargo run --release --example fusion_ablation
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
    let data = split(&samples, &SplitSpec::default())?;
    let cfg = TrainConfig {
        epochs: 20,
        optim: OptimConfig {
            init_lr: 0.03,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    println!("{:<8} {:>7} {:>7}", "fusion", "Dice", "IoU");
    for fusion in FusionMode::ALL {
        let mut params = train(&arch, fusion, &cfg, &data, None, |_| {})?.best.params;
        let m = evaluate(&mut params, &data.test, &cfg.binarize)?.mean;
        println!("{:<8} {:>7.2} {:>7.2}", fusion.to_string(), 100.0 * m.dice, 100.0 * m.iou);
    }
    Ok(())
}
