//! Loads a checkpoint and writes the five output maps for one image.
//!
//! Without arguments it first trains a small model for half a minute.
//!
//! ```text
//! cargo run --release --example predict -- <checkpoint dir> <image.png> <out dir>
//! ```

use std::path::{Path, PathBuf};

use semiseg::checkpoint::Checkpoint;
use semiseg::data::{generate_synthetic, load_image, save_png, split, SplitSpec};
use semiseg::optim::OptimConfig;
use semiseg::pipeline::BinarizePolicy;
use semiseg::trainer::{predict, train, TrainConfig, CHECKPOINT_DIR};
use semiseg::{ArchConfig, FusionMode, Result};

fn quick_checkpoint(root: &Path) -> Result<(PathBuf, PathBuf)> {
    let data_dir = root.join("data");
    let samples = generate_synthetic(200, 32, 1, &data_dir)?;
    let data = split(&samples, &SplitSpec::default())?;
    let arch = ArchConfig {
        stage_widths: [8, 16, 32, 64, 64],
        input_size: 32,
        ..ArchConfig::toy()
    };
    let cfg = TrainConfig {
        epochs: 15,
        optim: OptimConfig {
            init_lr: 0.03,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    train(&arch, FusionMode::Gff, &cfg, &data, Some(&root.join("run")), |_| {})?;
    let image = data_dir.join("images").join(format!("{}.png", data.test[0].id));
    Ok((root.join("run").join(CHECKPOINT_DIR), image))
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (ckpt, image, out) = match args.as_slice() {
        [c, i, o] => (PathBuf::from(c), PathBuf::from(i), PathBuf::from(o)),
        _ => {
            let root = PathBuf::from("predict_demo");
            let (c, i) = quick_checkpoint(&root)?;
            (c, i, root.join("maps"))
        }
    };
    let mut params = Checkpoint::load(&ckpt)?.params;
    let raster = load_image(&image)?;
    let p = predict(&mut params, &raster, &BinarizePolicy::default())?;
    for (name, r) in [
        ("y_coarse", &p.y_coarse),
        ("y_fine1", &p.y_fine),
        ("overlay", &p.overlay),
        ("x_mask", &p.x_mask),
        ("x_hat1", &p.x_hat),
    ] {
        save_png(&out.join(format!("{name}.png")), r)?;
    }
    let fg = p.y_fine.data.iter().filter(|&&v| v >= 0.5).count();
    println!(
        "{}x{} image, {:.1}% predicted lesion; maps in {}",
        raster.width,
        raster.height,
        100.0 * fg as f64 / (raster.width * raster.height) as f64,
        out.display()
    );
    Ok(())
}
