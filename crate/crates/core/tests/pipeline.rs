//! Coarse-to-fine forward pass and the signals it feeds into training.

mod common;

use common::{max_abs_diff, rng, samples, tiny_arch, uniform};

use semiseg::data::image_batch;
use semiseg::gradcheck::jitter_affine;
use semiseg::losses::LossWeights;
use semiseg::nn::Mode;
use semiseg::pipeline::{coarse_forward, fine_forward, mask_image, two_stage, BinarizePolicy};
use semiseg::trainer::loss_and_grads;
use semiseg::{ArchConfig, FusionMode, NetworkParams, Tensor};

fn batch(n: u64, seed: u64, side: usize) -> Tensor<f64> {
    let s = samples(n, seed, side);
    image_batch(&s.iter().collect::<Vec<_>>()).unwrap()
}

struct Snapshot {
    y_coarse: Tensor<f64>,
    y_fine: Vec<Tensor<f64>>,
    x_hat: Vec<Tensor<f64>>,
    mask: Tensor<f64>,
    x_mask: Tensor<f64>,
}

fn run(p: &mut NetworkParams<f64>, x: &Tensor<f64>, mode: Mode) -> Snapshot {
    let (net, mut s) = p.session(mode);
    let o = two_stage(net, &mut s, x, &BinarizePolicy::default()).unwrap();
    let v = |var| s.graph.value(var).clone();
    Snapshot {
        y_coarse: v(o.y_coarse),
        y_fine: o.y_fine.iter().map(|&y| v(y)).collect(),
        x_hat: o.x_hat.iter().map(|&y| v(y)).collect(),
        mask: o.mask_coarse,
        x_mask: o.x_mask,
    }
}

#[test]
fn masked_image_is_exactly_the_zeroed_input() {
    let mut p = NetworkParams::<f64>::init(&tiny_arch(), FusionMode::Gff, 3).unwrap();
    jitter_affine(&mut p, 0.5, 3);
    for seed in 0..5 {
        let x = batch(2, seed, 16);
        let snap = run(&mut p, &x, Mode::TRAIN);
        let hw = 16 * 16;
        for (i, (&got, &xi)) in snap.x_mask.data().iter().zip(x.data()).enumerate() {
            let m = snap.mask.data()[(i / (3 * hw)) * hw + i % hw];
            assert_eq!(got, if m == 1.0 { 0.0 } else { xi });
        }
        assert_eq!(mask_image(&x, &snap.mask).unwrap(), snap.x_mask);
    }
}

#[test]
fn degenerate_coarse_masks_stay_finite() {
    let labeled = samples(1, 0, 16);
    let unlabeled: Vec<_> = samples(3, 0, 16)[1..].iter().map(|s| s.withhold_mask()).collect();
    for bias in [50.0, -50.0] {
        let mut p = NetworkParams::<f64>::init(&tiny_arch(), FusionMode::Gff, 0).unwrap();
        p.store.by_name_mut("head_seg.layer1.bias").unwrap().data_mut()[0] = bias;
        let e = loss_and_grads(&mut p, &labeled, &unlabeled, &LossWeights::default(), &BinarizePolicy::default()).unwrap();
        let full = bias > 0.0;
        assert!(e.mask_coarse.data().iter().all(|&m| m == full as u8 as f64));
        let inp = e.inp.unwrap();
        assert!(inp.is_finite() && e.total.is_finite());
        if !full {
            assert_eq!(inp, 0.0);
        }
        for g in e.grads.iter().flatten() {
            assert!(g.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn closed_select_gate_reduces_fine_to_coarse() {
    let mut p = NetworkParams::<f64>::init(&tiny_arch(), FusionMode::Gff, 5).unwrap();
    jitter_affine(&mut p, 0.3, 5);
    for i in 1..=5 {
        let b = p.store.by_name_mut(&format!("fusion{i}.select.bias")).unwrap();
        b.data_mut().iter_mut().for_each(|v| *v = -1e3);
    }
    let x = batch(2, 8, 16);
    let mode = Mode { train: true, grad: false };
    let (net, mut s) = p.session(mode);
    let xv = s.input(x.clone()).unwrap();
    let coarse = coarse_forward(net, &mut s, xv).unwrap();
    let (fine, _) = fine_forward(net, &mut s, xv, xv).unwrap();
    let err = max_abs_diff(s.graph.value(coarse).data(), s.graph.value(fine[0]).data());
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn inpainting_reaches_the_shared_encoder() {
    let unlabeled: Vec<_> = samples(2, 4, 16).into_iter().map(|s| s.withhold_mask()).collect();
    let w = LossWeights::default();
    let policy = BinarizePolicy::default();
    let mut p = NetworkParams::<f64>::init(&tiny_arch(), FusionMode::Gff, 11).unwrap();
    jitter_affine(&mut p, 0.1, 11);
    let base = p.clone();
    let e = loss_and_grads(&mut p, &[], &unlabeled, &w, &policy).unwrap();
    assert!(e.seg.is_none());
    let (mut best, mut best_abs) = (None, 0.0);
    for (entry, grad) in base.store.entries().iter().zip(&e.grads) {
        if entry.name.starts_with("encoder") && entry.name.ends_with("conv.weight") {
            let g = grad.as_ref().unwrap();
            let (k, v) = g.data().iter().enumerate().fold((0, 0.0f64), |a, (k, &v)| if v.abs() > a.1.abs() { (k, v) } else { a });
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = Some((entry.name.clone(), k, v));
            }
        }
    }
    let (name, k, analytic) = best.expect("encoder weights present");
    assert!(best_abs > 0.0);

    let h = 1e-6;
    let at = |d: f64| {
        let mut q = base.clone();
        q.store.by_name_mut(&name).unwrap().data_mut()[k] += d;
        let e2 = loss_and_grads(&mut q, &[], &unlabeled, &w, &policy).unwrap();
        assert_eq!(e2.mask_coarse, e.mask_coarse, "probe flipped the coarse mask");
        e2.total
    };
    let numeric = (at(h) - at(-h)) / (2.0 * h);
    let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
    assert!(rel <= 1e-4, "{name}[{k}]: {numeric} vs {analytic}");
}

#[test]
fn end_to_end_shapes_and_ranges() {
    let cfg = ArchConfig::toy();
    let mut p = NetworkParams::<f32>::init(&cfg, FusionMode::Gff, 0).unwrap();
    let x = uniform::<f32>(&mut rng(0), [1, 3, 64, 64], 0.0, 1.0);
    let (net, mut s) = p.session(Mode::EVAL);
    let o = two_stage(net, &mut s, &x, &BinarizePolicy::default()).unwrap();
    assert_eq!(s.graph.value(o.y_coarse).shape(), &[1, 1, 64, 64]);
    assert!(s.graph.value(o.y_coarse).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(o.x_mask.shape(), x.shape());
    assert!(o.mask_coarse.data().iter().all(|&v| v == 0.0 || v == 1.0));
    for (i, side) in [64, 32, 16, 8, 4].into_iter().enumerate() {
        let y = s.graph.value(o.y_fine[i]);
        assert_eq!(y.shape(), &[1, 1, side, side]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let xh = s.graph.value(o.x_hat[i]);
        assert_eq!(xh.shape(), &[1, 3, side, side]);
        assert!(xh.data().iter().all(|v| v.is_finite()));
        assert_eq!(o.mask_per_layer[i].shape(), &[1, 1, side, side]);
        assert!(o.mask_per_layer[i].data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn segmentation_decoder_is_shared_and_inpainting_decoder_is_not() {
    let x = batch(2, 1, 16);
    let mut p = NetworkParams::<f64>::init(&tiny_arch(), FusionMode::Gff, 2).unwrap();
    jitter_affine(&mut p, 0.3, 2);
    let base = run(&mut p.clone(), &x, Mode::TRAIN);

    let mut seg = p.clone();
    seg.store.by_name_mut("decoder_seg.layer2.b.conv.weight").unwrap().data_mut()[0] += 0.5;
    let after = run(&mut seg, &x, Mode::TRAIN);
    assert_ne!(after.y_coarse, base.y_coarse);
    assert_ne!(after.y_fine[0], base.y_fine[0]);

    let mut inp = p.clone();
    inp.store.by_name_mut("decoder_inp.layer2.b.conv.weight").unwrap().data_mut()[0] += 0.5;
    let after = run(&mut inp, &x, Mode::TRAIN);
    assert_eq!(after.y_coarse, base.y_coarse);
    assert_eq!(after.y_fine, base.y_fine);
    assert_eq!(after.mask, base.mask);
    assert_ne!(after.x_hat[0], base.x_hat[0]);
}
