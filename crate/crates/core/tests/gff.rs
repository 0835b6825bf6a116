//! Gated feature fusion against a step-by-step transcription.

mod common;

use common::gff_oracle::{compare, random_gff};
use common::{rng, tiny_arch, uniform};
use proptest::prelude::*;

use semiseg::gff::{fuse, gate_combine, gff_trace, FusionLayer};
use semiseg::nn::{BnSettings, Mode, ParamBuilder, ParamStore, Session};
use semiseg::pipeline::{two_stage, BinarizePolicy};
use semiseg::{FusionMode, NetworkParams, Tensor};

#[test]
fn matches_transcription_on_random_instances() {
    for seed in 0..100 {
        let c = compare(seed);
        assert!(c.rel_err <= 1e-6, "seed {seed}: {:e}", c.rel_err);
        assert!(c.gates_open && c.convex, "seed {seed}");
    }
}

#[test]
fn closed_select_gate_returns_e_seg() {
    let mut r = rng(4);
    let e_seg = uniform(&mut r, [2, 3, 4, 4], -2.0, 2.0);
    let e_inp = uniform(&mut r, [2, 3, 4, 4], -2.0, 2.0);
    let (mut store, p) = random_gff(4, 3);
    store.get_mut(p.select.bias.unwrap()).data_mut().fill(-1e3);
    let mut s = Session::new(&mut store, Mode::EVAL, BnSettings::default());
    let (a, i) = (s.input(e_seg.clone()).unwrap(), s.input(e_inp).unwrap());
    let t = gff_trace(&mut s, &p, a, i).unwrap();
    assert_eq!(s.graph.value(t.fused).data(), e_seg.data());
}

#[test]
fn argument_order_matters() {
    let mut r = rng(8);
    let e_seg = uniform(&mut r, [1, 2, 3, 3], -2.0, 2.0);
    let e_inp = uniform(&mut r, [1, 2, 3, 3], -2.0, 2.0);
    let (mut store, p) = random_gff(8, 2);
    let mut s = Session::new(&mut store, Mode::EVAL, BnSettings::default());
    let (a, i) = (s.input(e_seg).unwrap(), s.input(e_inp).unwrap());
    let ab = gff_trace(&mut s, &p, a, i).unwrap().fused;
    let ba = gff_trace(&mut s, &p, i, a).unwrap().fused;
    assert_ne!(s.graph.value(ab).data(), s.graph.value(ba).data());
}

#[test]
fn closed_gates_cut_the_e_inp_gradient() {
    let mut r = rng(12);
    let e_seg = uniform(&mut r, [1, 2, 4, 4], -1.0, 1.0);
    let e_inp = uniform(&mut r, [1, 2, 4, 4], -1.0, 1.0);
    let (mut store, p) = random_gff(12, 2);
    store.get_mut(p.reset.bias.unwrap()).data_mut().fill(-30.0);
    store.get_mut(p.select.bias.unwrap()).data_mut().fill(-30.0);
    let weights = uniform::<f64>(&mut r, [1, 2, 4, 4], -1.0, 1.0);
    let objective = |store: &mut ParamStore<f64>, e_inp: &Tensor<f64>, grad: bool| {
        let mut s = Session::new(store, Mode::EVAL, BnSettings::default());
        let a = s.input(e_seg.clone()).unwrap();
        let i = s.graph.leaf(e_inp.clone(), grad).unwrap();
        let out = gff_trace(&mut s, &p, a, i).unwrap().fused;
        let w = s.input(weights.clone()).unwrap();
        let prod = s.graph.mul(out, w).unwrap();
        let loss = s.graph.sum(prod).unwrap();
        let value = s.graph.value(loss).data()[0];
        let g = grad.then(|| {
            s.graph.backward(loss).unwrap();
            s.graph.grad(i).unwrap().clone()
        });
        (value, g)
    };
    let (_, g) = objective(&mut store, &e_inp, true);
    assert!(g.unwrap().data().iter().all(|v| v.abs() <= 1e-5));
    let h = 1e-4;
    for k in 0..e_inp.len() {
        let mut up = e_inp.clone();
        up.data_mut()[k] += h;
        let mut down = e_inp.clone();
        down.data_mut()[k] -= h;
        let fd = (objective(&mut store, &up, false).0 - objective(&mut store, &down, false).0) / (2.0 * h);
        assert!(fd.abs() <= 1e-5, "coordinate {k}: {fd:e}");
    }
}

#[test]
fn add_and_concat_modes() {
    let mut r = rng(3);
    let e_seg = uniform(&mut r, [2, 3, 2, 2], -1.0, 1.0);
    let mut store = ParamStore::<f64>::new();
    let concat = FusionLayer::build(&mut ParamBuilder::new(&mut store, 0), FusionMode::Concat, "c", 3);
    let FusionLayer::Concat(conv) = &concat else { panic!("concat layer") };
    // 1x1 kernel picking the first C input channels
    let k = store.get_mut(conv.weight);
    let data: Vec<f64> = (0..k.len()).map(|i| if i / 6 == i % 6 { 1.0 } else { 0.0 }).collect();
    k.data_mut().copy_from_slice(&data);
    let mut s = Session::new(&mut store, Mode::EVAL, BnSettings::default());
    let a = s.input(e_seg.clone()).unwrap();
    let zeros = s.input(Tensor::zeros([2, 3, 2, 2])).unwrap();
    let noise = s.input(uniform(&mut r, [2, 3, 2, 2], -1.0, 1.0)).unwrap();
    let added = fuse(&mut s, &FusionLayer::Add, a, zeros).unwrap();
    assert_eq!(s.graph.value(added).data(), e_seg.data());
    let picked = fuse(&mut s, &concat, a, noise).unwrap();
    assert_eq!(s.graph.value(picked).data(), e_seg.data());
}

#[test]
fn one_fusion_point_feeds_both_decoders() {
    let mut p = NetworkParams::<f64>::init(&tiny_arch(), FusionMode::Gff, 2).unwrap();
    let names: Vec<&str> = p.store.entries().iter().map(|e| e.name.as_str()).filter(|n| n.contains("fusion")).collect();
    assert_eq!(names.len(), 5 * 6);
    assert!(names.iter().all(|n| n.starts_with("fusion")));
    let x = uniform(&mut rng(1), [2, 3, 16, 16], 0.0, 1.0);
    let run = |p: &mut NetworkParams<f64>| {
        let (net, mut s) = p.session(Mode { train: true, grad: false });
        let out = two_stage(net, &mut s, &x, &BinarizePolicy::default()).unwrap();
        (s.graph.value(out.y_fine[0]).clone(), s.graph.value(out.x_hat[0]).clone())
    };
    let before = run(&mut p);
    p.store.by_name_mut("fusion1.project.bias").unwrap().data_mut()[0] += 0.3;
    let after = run(&mut p);
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn gate_combine_is_a_convex_combination(
        sel in proptest::collection::vec(0.0f64..=1.0, 8),
        a in proptest::collection::vec(-5.0f64..5.0, 8),
        b in proptest::collection::vec(-5.0f64..5.0, 8),
    ) {
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::EVAL, BnSettings::default());
        let sv = s.input(Tensor::new([8], sel).unwrap()).unwrap();
        let av = s.input(Tensor::new([8], a.clone()).unwrap()).unwrap();
        let bv = s.input(Tensor::new([8], b.clone()).unwrap()).unwrap();
        let out = gate_combine(&mut s, sv, av, bv).unwrap();
        for (i, &v) in s.graph.value(out).data().iter().enumerate() {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
