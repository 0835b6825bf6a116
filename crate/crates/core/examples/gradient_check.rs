//! Finite-difference check of a few graph ops and of the whole training
//! objective.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use semiseg::data::{prepare, synthesize, SyntheticSpec};
use semiseg::gradcheck::{check_function, check_objective, jitter_affine};
use semiseg::losses::LossWeights;
use semiseg::{ArchConfig, FusionMode, NetworkParams, Result, Tensor};

fn main() -> Result<()> {
    let x = Tensor::from_fn([2, 3, 6, 6], |i| ((i * 37) % 23) as f64 / 23.0 - 0.5);
    let k = Tensor::from_fn([4, 3, 3, 3], |i| ((i * 11) % 7) as f64 / 7.0 - 0.4);
    let err = check_function(&[x.clone(), k], |g, v| g.conv2d(v[0], v[1], None, 2, 1), 1e-5, 0)?;
    println!("conv2d stride 2        rel err {err:.2e}");
    let err = check_function(std::slice::from_ref(&x), |g, v| {
        let p = g.maxpool2x(v[0])?;
        g.sigmoid(p)
    }, 1e-5, 1)?;
    println!("maxpool -> sigmoid     rel err {err:.2e}");
    let err = check_function(&[x], |g, v| g.upsample2x(v[0], semiseg::kernels::UpsampleMode::Bilinear), 1e-5, 2)?;
    println!("bilinear upsample      rel err {err:.2e}");

    // The full objective: two labeled and two unlabeled 16x16 images through
    // a four-channel network, checked in f64 and f32.
    let spec = SyntheticSpec::new(32);
    let batch: Vec<_> = (0..4).map(|i| prepare(&synthesize(&spec, 3, i), 16)).collect();
    let unlabeled: Vec<_> = batch[2..].iter().map(|s| s.withhold_mask()).collect();
    let arch = ArchConfig {
        stage_widths: [4; 5],
        input_size: 16,
        ..ArchConfig::toy()
    };
    for fusion in FusionMode::ALL {
        let mut params = NetworkParams::<f32>::init(&arch, fusion, 0)?;
        // move BN affines off their initial values so no unit starts at a kink
        jitter_affine(&mut params, 0.1, 0);
        let c = check_objective(&params, &batch[..2], &unlabeled, &LossWeights::default(), 10, 1e-6, 0)?;
        println!(
            "objective {:<8} f64 {:.2e}  f32 {:.2e}  over {} coordinates, coarse mask covers {:.0}%",
            format!("({fusion})"),
            c.rel_err_f64,
            c.rel_err_f32,
            c.coordinates,
            100.0 * c.mask_coverage
        );
    }
    Ok(())
}
