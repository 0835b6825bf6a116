//! Gated fusion of two feature maps, next to the add and concat baselines.
//!
//! ```text
//! cargo run --release --example gated_fusion
//! ```

use semiseg::gff::{fuse, gff_trace, FusionLayer};
use semiseg::nn::{BnSettings, Mode, ParamBuilder, ParamStore, Session};
use semiseg::{FusionMode, Result, Tensor};

fn stats(name: &str, t: &Tensor<f32>) {
    let n = t.len() as f32;
    let mean = t.data().iter().sum::<f32>() / n;
    let (lo, hi) = t.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("  {name:<14} mean {mean:+.3}  range [{lo:+.3}, {hi:+.3}]");
}

fn main() -> Result<()> {
    let channels = 8;
    let shape = [2, channels, 8, 8];
    let e_seg = Tensor::from_fn(shape, |i| ((i as f32) * 0.37).sin());
    let e_inp = Tensor::from_fn(shape, |i| ((i as f32) * 0.11).cos());

    let mut store = ParamStore::<f32>::new();
    let layers: Vec<(FusionMode, FusionLayer)> = FusionMode::ALL
        .into_iter()
        .map(|mode| (mode, FusionLayer::build(&mut ParamBuilder::new(&mut store, 1), mode, &format!("{mode}"), channels)))
        .collect();

    let mut s = Session::new(&mut store, Mode::EVAL, BnSettings::default());
    let a = s.input(e_seg.clone())?;
    let b = s.input(e_inp)?;
    println!("input:");
    stats("e_seg", &e_seg);
    for (mode, layer) in &layers {
        println!("{mode}:");
        if let FusionLayer::Gff(p) = layer {
            let t = gff_trace(&mut s, p, a, b)?;
            stats("reset gate", s.graph.value(t.reset));
            stats("select gate", s.graph.value(t.select));
            stats("reintegrated", s.graph.value(t.reintegrated));
        }
        let out = fuse(&mut s, layer, a, b)?;
        stats("fused", s.graph.value(out));
    }
    Ok(())
}
