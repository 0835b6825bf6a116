//! Gated fusion written out one equation at a time.

use rand::Rng;

use super::{naive_conv, rng, uniform};
use semiseg::gff::{gff_trace, GffParams};
use semiseg::nn::{BnSettings, Conv, Mode, ParamBuilder, ParamStore, Session};
use semiseg::Tensor;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn cat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = a.dims4().unwrap();
    let hw = h * w;
    let mut out = Vec::with_capacity(2 * a.len());
    for bi in 0..n {
        out.extend_from_slice(&a.data()[bi * c * hw..(bi + 1) * c * hw]);
        out.extend_from_slice(&b.data()[bi * c * hw..(bi + 1) * c * hw]);
    }
    Tensor::new([n, 2 * c, h, w], out).unwrap()
}

/// `r = sigmoid(conv_r([e_seg, e_inp]))`, `s = sigmoid(conv_s([e_seg, e_inp]))`,
/// `e~ = conv_p([r * e_inp, e_seg])`, `e = s * e~ + (1 - s) * e_seg`.
pub fn oracle(store: &ParamStore<f64>, p: &GffParams, e_seg: &Tensor<f64>, e_inp: &Tensor<f64>) -> Vec<f64> {
    let apply = |conv: &Conv, x: &Tensor<f64>| naive_conv(x, store.get(conv.weight), store.get(conv.bias.unwrap()).data(), 1, 1);
    let both = cat(e_seg, e_inp);
    let r = apply(&p.reset, &both).map(sigmoid);
    let s = apply(&p.select, &both).map(sigmoid);
    let gated = Tensor::new(e_inp.shape().to_vec(), r.data().iter().zip(e_inp.data()).map(|(a, b)| a * b).collect()).unwrap();
    let tilde = apply(&p.project, &cat(&gated, e_seg));
    (0..e_seg.len())
        .map(|i| s.data()[i] * tilde.data()[i] + (1.0 - s.data()[i]) * e_seg.data()[i])
        .collect()
}

/// Fusion parameters with He-initialized kernels and uniform biases.
pub fn random_gff(seed: u64, c: usize) -> (ParamStore<f64>, GffParams) {
    let mut store = ParamStore::new();
    let p = GffParams::build(&mut ParamBuilder::new(&mut store, seed), "g", c);
    let mut r = rng(seed ^ 77);
    for e in store.entries_mut() {
        if e.name.ends_with("bias") {
            for v in e.value.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
    }
    (store, p)
}

pub struct Comparison {
    /// Max absolute difference over the max oracle magnitude.
    pub rel_err: f64,
    /// Both gates strictly inside (0, 1).
    pub gates_open: bool,
    /// Output between `e_seg` and the reintegrated feature everywhere.
    pub convex: bool,
}

/// Library fusion against the oracle on a random instance of random size.
pub fn compare(seed: u64) -> Comparison {
    let mut r = rng(seed);
    let (b, c, h, w) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..6), r.random_range(1..6));
    let e_seg = uniform(&mut r, [b, c, h, w], -2.0, 2.0);
    let e_inp = uniform(&mut r, [b, c, h, w], -2.0, 2.0);
    let (mut store, p) = random_gff(seed, c);
    let want = oracle(&store, &p, &e_seg, &e_inp);
    let mut s = Session::new(&mut store, Mode::EVAL, BnSettings::default());
    let (a, i) = (s.input(e_seg.clone()).unwrap(), s.input(e_inp).unwrap());
    let t = gff_trace(&mut s, &p, a, i).unwrap();
    let got = s.graph.value(t.fused).data();
    let scale = want.iter().map(|v| v.abs()).fold(1e-12, f64::max);
    let rel_err = got.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale;
    let gates_open = [t.reset, t.select]
        .iter()
        .all(|&g| s.graph.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let tilde = s.graph.value(t.reintegrated).data();
    let convex = got.iter().enumerate().all(|(k, &v)| {
        let (lo, hi) = (tilde[k].min(e_seg.data()[k]), tilde[k].max(e_seg.data()[k]));
        v >= lo - 1e-12 && v <= hi + 1e-12
    });
    Comparison { rel_err, gates_open, convex }
}
