//! One coarse-to-fine pass over a synthetic image, writing the intermediate
//! maps as PNGs.
//!
//! ```text
//! cargo run --release --example two_stage_forward -- out/forward
//! ```

use std::path::PathBuf;

use semiseg::data::{image_batch, save_png, synthesize, Raster, SyntheticSpec};
use semiseg::nn::Mode;
use semiseg::pipeline::{two_stage, BinarizePolicy};
use semiseg::{ArchConfig, FusionMode, NetworkParams, Result};

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "forward".into()));
    let arch = ArchConfig::toy();
    let sample = synthesize(&SyntheticSpec::new(arch.input_size), 0, 0);
    let x = image_batch(&[&sample])?;

    let mut params = NetworkParams::<f32>::init(&arch, FusionMode::Gff, 0)?;
    println!("{} trainable parameters", params.store.trainable_count());
    // train-mode BN so an untrained network still produces a varied mask
    let (net, mut s) = params.session(Mode { train: true, grad: false });
    let o = two_stage(net, &mut s, &x, &BinarizePolicy::default())?;

    let coverage = o.mask_coarse.data().iter().sum::<f32>() / o.mask_coarse.len() as f32;
    println!("coarse mask covers {:.1}% of the image", 100.0 * coverage);
    for (i, (y, r)) in o.y_fine.iter().zip(&o.x_hat).enumerate() {
        println!(
            "layer {}: y_fine {:?}  x_hat {:?}  mask {:?}",
            i + 1,
            s.graph.value(*y).shape(),
            s.graph.value(*r).shape(),
            o.mask_per_layer[i].shape()
        );
    }
    save_png(&out.join("input.png"), &sample.image)?;
    save_png(&out.join("y_coarse.png"), &Raster::from_tensor(s.graph.value(o.y_coarse), 0)?)?;
    save_png(&out.join("x_mask.png"), &Raster::from_tensor(&o.x_mask, 0)?)?;
    save_png(&out.join("x_hat1.png"), &Raster::from_tensor(s.graph.value(o.x_hat[0]), 0)?)?;
    println!("wrote maps to {}", out.display());
    Ok(())
}
