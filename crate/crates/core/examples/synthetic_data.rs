//! Writes a synthetic lesion dataset and summarizes it.
//!
//! ```text
//! cargo run --release --example synthetic_data -- out/synth 50 64
//! ```

use std::path::PathBuf;

use semiseg::data::{generate_synthetic, load_dataset, read_splits};
use semiseg::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synth".into()));
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let size: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(64);

    generate_synthetic(n, size, 0, &dir)?;
    let samples = load_dataset(&dir)?;
    let areas: Vec<f64> = samples
        .iter()
        .map(|s| s.foreground_pixels() as f64 / (size * size) as f64)
        .collect();
    let mean = areas.iter().sum::<f64>() / areas.len() as f64;
    let (lo, hi) = areas.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{} images of {size}x{size} in {}", samples.len(), dir.display());
    println!("lesion area: mean {:.1}%, min {:.1}%, max {:.1}%", 100.0 * mean, 100.0 * lo, 100.0 * hi);
    if let Some(ids) = read_splits(&dir)? {
        println!(
            "splits.json: {} labeled, {} unlabeled, {} val, {} test",
            ids.labeled.len(),
            ids.unlabeled.len(),
            ids.val.len(),
            ids.test.len()
        );
    }
    Ok(())
}
