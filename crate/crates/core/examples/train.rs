//! Semi-supervised training on synthetic data with 20% of the training
//! images labeled, then a test-set report.
//!
//! ```text
//! cargo run --release --example train -- out/train
//! ```

use std::path::PathBuf;

use semiseg::data::{split, synthesize, SplitSpec, SyntheticSpec};
use semiseg::optim::OptimConfig;
use semiseg::trainer::{evaluate, train, TrainConfig};
use semiseg::{ArchConfig, FusionMode, Result};

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train".into()));
    let arch = ArchConfig {
        stage_widths: [8, 16, 32, 64, 64],
        input_size: 32,
        ..ArchConfig::toy()
    };
    let spec = SyntheticSpec::new(32);
    let samples: Vec<_> = (0..200).map(|i| synthesize(&spec, 100, i)).collect();
    let data = split(&samples, &SplitSpec::default())?;
    println!(
        "{} labeled, {} unlabeled, {} val, {} test",
        data.labeled.len(),
        data.unlabeled.len(),
        data.val.len(),
        data.test.len()
    );

    let cfg = TrainConfig {
        epochs: 20,
        optim: OptimConfig {
            init_lr: 0.03,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    let run = train(&arch, FusionMode::Gff, &cfg, &data, Some(&out), |log| {
        println!(
            "epoch {:>2}  seg {:.4}  inp {:.4}  val dice {:.2}",
            log.epoch,
            log.loss_seg.unwrap_or(f64::NAN),
            log.loss_inp.unwrap_or(f64::NAN),
            100.0 * log.val_dice.unwrap_or(f64::NAN)
        );
    })?;
    let best_epoch = run.best.manifest.rng.epoch;
    let mut params = run.best.params;
    let [dice, iou, acc, rec, spe] = evaluate(&mut params, &data.test, &cfg.binarize)?.mean.as_percentages();
    println!("best epoch {best_epoch}: test Dice {dice:.2} IoU {iou:.2} Acc {acc:.2} Rec {rec:.2} Spe {spe:.2}");
    println!("checkpoint and metrics.csv in {}", out.display());
    Ok(())
}
