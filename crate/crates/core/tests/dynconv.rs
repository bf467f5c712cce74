#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use proptest::prelude::*;
use pvckit::conv::ConvGeometry;
use pvckit::dynconv::*;
use pvckit::gradcheck::GradCheck;
use pvckit::params::{BoundParams, ParamStore};
use pvckit::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn spec(c_in: usize, c_out: usize, kernel: [usize; 3], transpose: bool, att: Option<usize>) -> LayerSpec {
    LayerSpec {
        name: "dc".into(),
        c_in,
        c_out,
        kernel,
        geom: if transpose { ConvGeometry::valid() } else { ConvGeometry::padded([0, 1, 1]) },
        transpose,
        relu: false,
        attention_features: att,
    }
}

fn build(s: LayerSpec, seed: u64) -> (ParamStore, DynConvLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = DynConvLayer::new(&mut store, s, &mut rng);
    // Non-zero biases so their gradients are exercised.
    for p in store.iter_mut() {
        if p.name.ends_with("bias") {
            let shape = p.tensor.shape().to_vec();
            p.tensor = random(&shape, seed + 100).map(|v| 0.3 * v);
        }
    }
    (store, layer)
}

fn zero_heads(store: &mut ParamStore) {
    for p in store.iter_mut() {
        if p.name.contains(".att_") {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
    }
}

/// Hand-rolled head: loop GAP, explicit dense products, logistic.
fn head_oracle(store: &ParamStore, head: &AttentionHead, x: &Tensor) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let vol: usize = s[2..].iter().product();
    let w1 = store.get(head.fc1_weight).data();
    let b1 = store.get(head.fc1_bias).data();
    let w2 = store.get(head.fc2_weight).data();
    let b2 = store.get(head.fc2_bias).data();
    let hidden = b1.len();
    (0..n)
        .map(|b| {
            let g: Vec<f64> = (0..c)
                .map(|ch| {
                    let mut acc = 0.0;
                    for v in 0..vol {
                        acc += x.data()[(b * c + ch) * vol + v];
                    }
                    acc / vol as f64
                })
                .collect();
            let h: Vec<f64> = (0..hidden)
                .map(|j| {
                    let mut z = b1[j];
                    for k in 0..c {
                        z += w1[j * c + k] * g[k];
                    }
                    z.max(0.0)
                })
                .collect();
            (0..head.n)
                .map(|j| {
                    let mut z = b2[j];
                    for k in 0..hidden {
                        z += w2[j * hidden + k] * h[k];
                    }
                    1.0 / (1.0 + (-z).exp())
                })
                .collect()
        })
        .collect()
}

#[test]
fn zeroed_head_gives_one_half() {
    let (mut store, layer) = build(spec(2, 3, [1, 3, 3], false, Some(2)), 4);
    zero_heads(&mut store);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(random(&[2, 2, 2, 3, 3], 5));
    let (s, i, o) = layer.attention(&p, x, AttentionMode::Learned).unwrap().unwrap();
    for a in [s, i, o] {
        assert!(a.value().data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn head_matches_matmul_oracle() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let head = AttentionHead::new(&mut store, "h", 2, 3, &mut rng);
    store.get_mut(head.fc1_bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.05, -0.4, 0.2]);
    store.get_mut(head.fc2_bias).data_mut().copy_from_slice(&[0.5, -0.5, 0.25]);
    let x = random(&[3, 2, 2, 3, 2], 9);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let got = attention_forward(&head, &p, tape.constant(x.clone())).unwrap().to_tensor();
    assert_eq!(got.shape(), &[3, 3]);
    let want = head_oracle(&store, &head, &x);
    for b in 0..3 {
        for j in 0..3 {
            assert!((got.data()[b * 3 + j] - want[b][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn head_rejects_wrong_channels() {
    let mut store = ParamStore::new();
    let head = AttentionHead::new(&mut store, "h", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let err = attention_forward(&head, &p, tape.constant(Tensor::zeros(&[1, 3, 1, 1, 1]))).unwrap_err();
    assert_eq!(err.kind(), "dimension");
}

#[test]
fn dynamic_kernel_identities() {
    let w = random(&[3, 2, 1, 2, 2], 2);
    let tape = Tape::new();
    let wv = tape.constant(w.clone());
    let c = |n: usize, v: f64| tape.constant(Tensor::full(&[1, n], v));
    let ones = dynamic_kernel(wv, c(4, 1.0), c(2, 1.0), c(3, 1.0)).unwrap();
    assert_eq!(ones.value().data(), w.data());
    let halves = dynamic_kernel(wv, c(4, 0.5), c(2, 0.5), c(3, 0.5)).unwrap();
    for (h, x) in halves.value().data().iter().zip(w.data()) {
        assert!((h - 0.5 * x).abs() < 1e-15);
    }
}

#[test]
fn dynamic_kernel_broadcast_by_hand() {
    // W[o][i] for a 2x2x1x1x1 kernel.
    let w = [[1.0, 2.0], [3.0, 4.0]];
    let (spa, a_in, a_out) = (0.9, [0.1, 0.2], [0.3, 0.6]);
    let tape = Tape::new();
    let k = dynamic_kernel(
        tape.constant(Tensor::new(vec![2, 2, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        tape.constant(Tensor::new(vec![1, 1], vec![spa]).unwrap()),
        tape.constant(Tensor::new(vec![1, 2], a_in.to_vec()).unwrap()),
        tape.constant(Tensor::new(vec![1, 2], a_out.to_vec()).unwrap()),
    )
    .unwrap();
    assert_eq!(k.shape(), vec![1, 2, 2, 1, 1, 1]);
    for o in 0..2 {
        for i in 0..2 {
            let want = w[o][i] * (spa + a_in[i] + a_out[o]) / 3.0;
            assert!((k.value().data()[o * 2 + i] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn dynamic_kernel_length_mismatch() {
    let tape = Tape::new();
    let w = tape.constant(Tensor::zeros(&[3, 2, 1, 2, 2]));
    let c = |n: usize| tape.constant(Tensor::full(&[1, n], 1.0));
    assert!(dynamic_kernel(w, c(4), c(3), c(3)).is_err());
    assert!(dynamic_kernel(w, c(5), c(2), c(3)).is_err());
}

fn static_conv(store: &ParamStore, layer: &DynConvLayer, x: &Tensor, scale: f64) -> Tensor {
    let tape = Tape::new();
    let w = tape.constant(store.get(layer.weight).map(|v| v * scale));
    let b = tape.constant(store.get(layer.bias).clone());
    let x = tape.constant(x.clone());
    let y = if layer.transpose {
        x.conv3d_transpose(w, Some(b), layer.geom)
    } else {
        x.conv3d(w, Some(b), layer.geom)
    };
    y.unwrap().to_tensor()
}

fn dyn_out(store: &ParamStore, layer: &DynConvLayer, x: &Tensor, mode: AttentionMode) -> Tensor {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let mut st = DenseAttentionState::new(xv, true);
    dynconv_forward(layer, &p, xv, &mut st, mode).unwrap().to_tensor()
}

#[test]
fn forced_one_reduces_to_static_conv() {
    for transpose in [false, true] {
        let (store, layer) = build(spec(2, 3, [2, 3, 3], transpose, Some(2)), 11);
        let x = random(&[2, 2, 3, 4, 4], 12);
        let d = dyn_out(&store, &layer, &x, AttentionMode::Forced(1.0));
        let s = static_conv(&store, &layer, &x, 1.0);
        assert!(d.max_abs_diff(&s) <= 1e-12, "transpose={transpose}");
    }
}

#[test]
fn zeroed_heads_halve_the_kernel() {
    for transpose in [false, true] {
        let (mut store, layer) = build(spec(2, 3, [2, 3, 3], transpose, Some(2)), 13);
        zero_heads(&mut store);
        let x = random(&[2, 2, 3, 4, 4], 14);
        let d = dyn_out(&store, &layer, &x, AttentionMode::Learned);
        let s = static_conv(&store, &layer, &x, 0.5);
        assert!(d.max_abs_diff(&s) <= 1e-12);
    }
}

fn layer_gradcheck(transpose: bool, seed: u64) -> f64 {
    let (store, layer) = build(spec(2, 2, [2, 2, 2], transpose, Some(2)), seed);
    let mut inputs = vec![random(&[2, 2, 2, 3, 3], seed + 1)];
    inputs.extend(store.iter().map(|p| p.tensor.clone()));
    let out_shape = dyn_out(&store, &layer, &inputs[0], AttentionMode::Learned).shape().to_vec();
    let probe = random(&out_shape, seed + 2);
    let report = GradCheck::default()
        .run(&inputs, |tape, vars| {
            let params = BoundParams::from_vars(vars[1..].to_vec());
            let mut st = DenseAttentionState::new(vars[0], true);
            let y = dynconv_forward(&layer, &params, vars[0], &mut st, AttentionMode::Learned)?;
            Ok(y.mul(tape.constant(probe.clone()))?.sum())
        })
        .unwrap();
    report.max_rel_error()
}

#[test]
fn dynconv_gradients_match_finite_differences() {
    for seed in 0..3 {
        for transpose in [false, true] {
            let e = layer_gradcheck(transpose, 40 + seed);
            assert!(e < 1e-4, "seed {seed} transpose {transpose}: {e}");
        }
    }
}

/// Symbolic unroll: feature `l` is the `l`-th unit vector, so every entry of
/// a mixed attention input is the weight carried by that layer.
fn unit_features(tape: &Tape, count: usize) -> Vec<pvckit::Var<'_>> {
    (0..count)
        .map(|l| {
            let mut d = vec![0.0; count];
            d[l] = 1.0;
            tape.constant(Tensor::new(vec![1, 1, 1, 1, count], d).unwrap())
        })
        .collect()
}

fn closed_form(preceding: usize, count: usize) -> Vec<f64> {
    // weights over x_{m}, x_{m-1}, ..., x_1 are 1/2, 1/4, ..., and the
    // first layer repeats the second-to-last weight.
    let mut w = vec![0.0; count];
    if preceding == 1 {
        w[0] = 1.0;
        return w;
    }
    for j in 0..preceding - 1 {
        w[preceding - 1 - j] = 0.5f64.powi(j as i32 + 1);
    }
    w[0] = 0.5f64.powi(preceding as i32 - 1);
    w
}

#[test]
fn three_layer_unroll() {
    let tape = Tape::new();
    let raw = tape.constant(Tensor::full(&[1, 1, 1, 1, 3], 7.0));
    let mut st = DenseAttentionState::new(raw, true);
    assert_eq!(st.next_attention_input().unwrap().to_tensor(), raw.to_tensor());
    let (c1, c2, c3) = (2.0, -3.0, 5.0);
    let mut inputs = Vec::new();
    for c in [c1, c2, c3] {
        st.record_output(tape.constant(Tensor::full(&[1, 1, 1, 1, 3], c)));
        inputs.push(st.next_attention_input().unwrap().to_tensor());
    }
    let want = [c1, 0.5 * c2 + 0.5 * c1, 0.5 * c3 + 0.25 * c2 + 0.25 * c1];
    for (got, w) in inputs.iter().zip(want) {
        assert!(got.data().iter().all(|&v| (v - w).abs() < 1e-12), "{:?} vs {w}", got.data());
    }
}

#[test]
fn five_layer_geometric_decay() {
    let tape = Tape::new();
    let feats = unit_features(&tape, 5);
    let raw = tape.constant(Tensor::full(&[1, 1, 1, 1, 5], 100.0));
    let mut st = DenseAttentionState::new(raw, true);
    assert_eq!(st.next_attention_input().unwrap().to_tensor(), raw.to_tensor());
    for (l, f) in feats.iter().enumerate() {
        st.record_output(*f);
        let got = st.next_attention_input().unwrap().to_tensor();
        let want = closed_form(l + 1, 5);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "layer {}: {:?} vs {want:?}", l + 2, got.data());
        }
        assert!((got.sum() - 1.0).abs() < 1e-12);
    }
    assert_eq!(closed_form(5, 5), vec![1.0 / 16.0, 1.0 / 16.0, 0.125, 0.25, 0.5]);
}

#[test]
fn non_dense_chain_uses_previous_output() {
    let tape = Tape::new();
    let feats = unit_features(&tape, 4);
    let raw = tape.constant(Tensor::zeros(&[1, 1, 1, 1, 4]));
    let mut st = DenseAttentionState::new(raw, false);
    for f in &feats {
        st.record_output(*f);
        assert_eq!(st.next_attention_input().unwrap().to_tensor(), f.to_tensor());
    }
}

#[test]
fn dense_flag_keeps_parameter_count() {
    // The mix is parameter-free: the same layer serves both modes.
    let (store, layer) = build(spec(2, 3, [1, 3, 3], false, Some(2)), 3);
    let x = random(&[1, 2, 1, 5, 5], 4);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x);
    for dense in [true, false] {
        let mut st = DenseAttentionState::new(xv, dense);
        dynconv_forward(&layer, &p, xv, &mut st, AttentionMode::Learned).unwrap();
    }
    assert_eq!(store.scalar_count(), layer.param_ids().iter().map(|&i| store.get(i).len()).sum::<usize>());
}

#[test]
fn attention_depends_on_input() {
    for pair in 0..20u64 {
        let (store, layer) = build(spec(2, 3, [1, 3, 3], false, Some(2)), 500 + pair);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let a = tape.constant(random(&[1, 2, 2, 4, 4], 1000 + 2 * pair));
        let b = tape.constant(random(&[1, 2, 2, 4, 4], 1001 + 2 * pair));
        let (sa, ia, oa) = layer.attention(&p, a, AttentionMode::Learned).unwrap().unwrap();
        let (sb, ib, ob) = layer.attention(&p, b, AttentionMode::Learned).unwrap().unwrap();
        let diff = [(sa, sb), (ia, ib), (oa, ob)]
            .iter()
            .map(|(u, v)| u.value().max_abs_diff(&v.value()))
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "pair {pair}: {diff}");
    }
}

#[test]
fn per_item_kernels_match_single_item_runs() {
    let (store, layer) = build(spec(2, 3, [1, 3, 3], false, Some(2)), 21);
    let x = random(&[2, 2, 2, 4, 4], 22);
    let both = dyn_out(&store, &layer, &x, AttentionMode::Learned);
    let half = x.len() / 2;
    for b in 0..2 {
        let xb = Tensor::new(vec![1, 2, 2, 4, 4], x.data()[b * half..(b + 1) * half].to_vec()).unwrap();
        let yb = dyn_out(&store, &layer, &xb, AttentionMode::Learned);
        let n = yb.len();
        assert_eq!(&both.data()[b * n..(b + 1) * n], yb.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn attention_values_strictly_inside_unit_interval(seed in 0u64..10_000, scale in 1.0f64..1e6) {
        let (store, layer) = build(spec(2, 3, [1, 3, 3], false, Some(2)), seed);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(random(&[2, 2, 1, 3, 3], seed + 7).map(|v| v * scale));
        let (s, i, o) = layer.attention(&p, x, AttentionMode::Learned).unwrap().unwrap();
        for a in [s, i, o] {
            prop_assert!(a.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
