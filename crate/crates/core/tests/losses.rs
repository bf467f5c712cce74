use proptest::prelude::*;
use pvckit::gradcheck::GradCheck;
use pvckit::losses::*;
use pvckit::volume::{Label, TemplateSet, Volume};
use pvckit::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn eval(f: impl for<'t> Fn(Var<'t>, Var<'t>) -> pvckit::Result<Var<'t>>, y: &Tensor, x: &Tensor) -> f64 {
    let tape = Tape::new();
    f(tape.constant(y.clone()), tape.constant(x.clone())).unwrap().item().unwrap()
}

/// Direct sliding-window SSIM: explicit window loops, two-pass moments.
fn ssim_oracle(y: &Tensor, x: &Tensor, p: &SsimParams) -> f64 {
    let s = x.shape();
    let (items, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
    let k = p.window;
    let at = |t: &Tensor, i: usize, z: usize, r: usize, c: usize| t.data()[((i * d + z) * h + r) * w + c];
    let mut per_orientation = Vec::new();
    for o in 0..3 {
        let (count, rows, cols) = match o {
            0 => (d, h, w),
            1 => (h, d, w),
            _ => (w, d, h),
        };
        let idx = |pl: usize, r: usize, c: usize| match o {
            0 => (pl, r, c),
            1 => (r, pl, c),
            _ => (r, c, pl),
        };
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..items {
            for pl in 0..count {
                for r0 in 0..=rows - k {
                    for c0 in 0..=cols - k {
                        let mut xs = Vec::new();
                        let mut ys = Vec::new();
                        for r in r0..r0 + k {
                            for c in c0..c0 + k {
                                let (z, a, b) = idx(pl, r, c);
                                xs.push(at(x, i, z, a, b));
                                ys.push(at(y, i, z, a, b));
                            }
                        }
                        let m = xs.len() as f64;
                        let mx = xs.iter().sum::<f64>() / m;
                        let my = ys.iter().sum::<f64>() / m;
                        let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / m;
                        let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / m;
                        let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / m;
                        let (c1, c2) = (p.c1(), p.c2());
                        sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        n += 1;
                    }
                }
            }
        }
        per_orientation.push(sum / n as f64);
    }
    per_orientation.iter().sum::<f64>() / 3.0
}

#[test]
fn mae_examples_and_loop_oracle() {
    let x = random(&[2, 1, 3, 4, 5], 1);
    assert_eq!(eval(mae_loss, &x, &x), 0.0);
    let shifted = x.map(|v| v + 0.5);
    assert!((eval(mae_loss, &shifted, &x) - 0.5).abs() < 1e-12);
    let y = random(&[2, 1, 3, 4, 5], 2);
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += (y.data()[i] - x.data()[i]).abs();
    }
    assert!((eval(mae_loss, &y, &x) - acc / x.len() as f64).abs() < 1e-12);
}

#[test]
fn ssim_of_identical_volumes_is_one() {
    let x = random(&[1, 1, 12, 13, 14], 3);
    let p = SsimParams::for_reference(&x);
    assert_eq!(eval(|y, x| ssim_3plane(y, x, &p), &x, &x), 1.0);
    assert_eq!(eval(|y, x| ssim_loss(y, x, &p), &x, &x), 0.0);
}

#[test]
fn ssim_of_equal_constants_is_one() {
    for c in [0.0, 0.3, 7.0] {
        let x = Tensor::full(&[1, 1, 11, 11, 12], c);
        let p = SsimParams::for_reference(&x);
        let s = eval(|y, x| ssim_3plane(y, x, &p), &x, &x);
        assert!((s - 1.0).abs() < 1e-15, "c={c}: {s}");
    }
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let x = random(&[1, 1, 16, 16, 16], 4);
    let y = random(&[1, 1, 16, 16, 16], 5);
    let p = SsimParams::for_reference(&y);
    let got = eval(|y, x| ssim_3plane(y, x, &p), &y, &x);
    let want = ssim_oracle(&y, &x, &p);
    assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    // correlated pair (values near 1)
    let x2 = y.map(|v| 0.9 * v + 0.05);
    let got = eval(|y, x| ssim_3plane(y, x, &p), &y, &x2);
    assert!((got - ssim_oracle(&y, &x2, &p)).abs() <= 1e-9);
}

#[test]
fn ssim_is_symmetric() {
    let x = random(&[2, 1, 11, 12, 13], 6);
    let y = random(&[2, 1, 11, 12, 13], 7);
    let p = SsimParams::with_range(1.0);
    let a = eval(|y, x| ssim_3plane(y, x, &p), &y, &x);
    let b = eval(|y, x| ssim_3plane(y, x, &p), &x, &y);
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn ssim_window_errors_and_lenient_skip() {
    let x = random(&[1, 1, 8, 12, 12], 8);
    let p = SsimParams::with_range(1.0);
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    assert_eq!(ssim_3plane(v, v, &p).unwrap_err().kind(), "window");
    // Only the transverse orientation fits; lenient mode uses it alone.
    let y = random(&[1, 1, 8, 12, 12], 9);
    let lenient = eval(|a, b| ssim_3plane(a, b, &p.lenient()), &y, &x);
    let mut acc = 0.0;
    let mut n = 0;
    for z in 0..8 {
        let off = z * 144;
        for r0 in 0..2 {
            for c0 in 0..2 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for r in r0..r0 + 11 {
                    for c in c0..c0 + 11 {
                        xs.push(x.data()[off + r * 12 + c]);
                        ys.push(y.data()[off + r * 12 + c]);
                    }
                }
                let m = 121.0;
                let mx = xs.iter().sum::<f64>() / m;
                let my = ys.iter().sum::<f64>() / m;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / m;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / m;
                let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / m;
                acc += (2.0 * mx * my + p.c1()) * (2.0 * cxy + p.c2())
                    / ((mx * mx + my * my + p.c1()) * (vx + vy + p.c2()));
                n += 1;
            }
        }
    }
    assert!((lenient - acc / n as f64).abs() < 1e-9);
    let tiny = Tensor::zeros(&[1, 1, 4, 4, 4]);
    let tape = Tape::new();
    let t = tape.constant(tiny);
    assert!(ssim_3plane(t, t, &p.lenient()).is_err());
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let x = random(&[1, 1, 11, 12, 11], 10);
    let y = random(&[1, 1, 11, 12, 11], 11);
    let p = SsimParams::for_reference(&y);
    let report = GradCheck {
        max_coords: Some(300),
        ..GradCheck::default()
    }
    .run(&[y, x], |_, v| ssim_3plane(v[0], v[1], &p))
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
}

#[test]
fn sobel_zero_cases() {
    let x = random(&[1, 1, 4, 5, 6], 12);
    assert_eq!(eval(sobel_loss, &x, &x), 0.0);
    let a = Tensor::full(&[1, 1, 4, 5, 6], 0.2);
    let b = Tensor::full(&[1, 1, 4, 5, 6], 3.0);
    assert_eq!(eval(sobel_loss, &a, &b), 0.0);
}

#[test]
fn sobel_step_edge_by_hand() {
    // Step along the last axis: Gx is 4 on the two columns next to the edge in
    // the two orientations containing that axis, zero elsewhere. Mean:
    // (1/3) * [(8/W)/2 + (8/W)/2 + 0] = 8 / (3W).
    let (d, h, w) = (5, 6, 8);
    let mut step = vec![0.0; d * h * w];
    for (i, v) in step.iter_mut().enumerate() {
        if i % w >= w / 2 {
            *v = 1.0;
        }
    }
    let x = Tensor::new(vec![1, 1, d, h, w], step).unwrap();
    let flat = Tensor::zeros(&[1, 1, d, h, w]);
    let got = eval(sobel_loss, &flat, &x);
    assert!((got - 8.0 / (3.0 * w as f64)).abs() < 1e-12, "{got}");
}

#[test]
fn sobel_gradient_matches_finite_differences() {
    let x = random(&[2, 1, 3, 4, 5], 13);
    let y = random(&[2, 1, 3, 4, 5], 14);
    let report = GradCheck::default().run(&[y, x], |_, v| sobel_loss(v[0], v[1])).unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
}

fn phantom_labels(dims: [usize; 3], seed: u64) -> TemplateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let mut labels: Vec<Label> = (0..n).map(|_| Label::ALL[rng.random_range(0..5)]).collect();
    labels[0] = Label::Myocardium;
    labels[1] = Label::BloodPool;
    TemplateSet::new(dims, labels).unwrap()
}

fn region_vol(t: &TemplateSet, myo: f64, bp: f64) -> Volume {
    let data = t
        .labels
        .iter()
        .map(|l| match l {
            Label::Myocardium => myo,
            Label::BloodPool => bp,
            _ => 0.7,
        })
        .collect();
    Volume::new(t.dims, [4.0; 3], data).unwrap()
}

#[test]
fn imbv_examples() {
    let t = phantom_labels([3, 4, 5], 1);
    assert_eq!(imbv(&region_vol(&t, 2.0, 4.0), &t).unwrap(), 0.5);
    assert_eq!(imbv(&Volume::filled(t.dims, [4.0; 3], 3.0), &t).unwrap(), 1.0);
    assert_eq!(imbv(&region_vol(&t, 2.0, 0.0), &t).unwrap_err().kind(), "degenerate_region");
    let no_bp = TemplateSet::new([1, 1, 2], vec![Label::Myocardium, Label::Liver]).unwrap();
    assert!(imbv(&Volume::filled([1, 1, 2], [4.0; 3], 1.0), &no_bp).is_err());
}

#[test]
fn imbv_matches_masked_mean_oracle_and_is_scale_invariant() {
    let t = phantom_labels([4, 6, 6], 2);
    let v = Volume::new(t.dims, [4.0; 3], random(&[144], 3).into_data()).unwrap();
    let (mut sm, mut nm, mut sb, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (x, l) in v.data.iter().zip(&t.labels) {
        match l {
            Label::Myocardium => {
                sm += x;
                nm += 1.0;
            }
            Label::BloodPool => {
                sb += x;
                nb += 1.0;
            }
            _ => {}
        }
    }
    let want = (sm / nm) / (sb / nb);
    let got = imbv(&v, &t).unwrap();
    assert!((got - want).abs() < 1e-12);
    let scaled = v.with_data(v.data.iter().map(|x| 3.7 * x).collect());
    assert!((imbv(&scaled, &t).unwrap() - got).abs() < 1e-12);
    // differentiable path agrees
    let masks = ImbvMasks::new(&[&t]).unwrap();
    let tape = Tape::new();
    let b = imbv_batch(tape.constant(v.to_tensor()), &masks).unwrap();
    assert!((b.value().data()[0] - want).abs() < 1e-12);
}

#[test]
fn imbv_loss_examples_and_gradient() {
    let t = phantom_labels([3, 4, 4], 4);
    let masks = ImbvMasks::new(&[&t]).unwrap();
    let x = region_vol(&t, 0.2, 1.0).to_tensor();
    let y = region_vol(&t, 0.17, 1.0).to_tensor();
    assert_eq!(eval(|a, b| imbv_loss(a, b, &masks), &x, &x), 0.0);
    assert!((eval(|a, b| imbv_loss(a, b, &masks), &y, &x) - 0.03).abs() < 1e-12);

    let t2 = phantom_labels([3, 4, 4], 5);
    let masks = ImbvMasks::new(&[&t, &t2]).unwrap();
    let xr = random(&[2, 1, 3, 4, 4], 6).map(|v| v + 0.1);
    let yr = random(&[2, 1, 3, 4, 4], 7).map(|v| v + 0.1);
    let report = GradCheck::default()
        .run(&[yr, xr], |_, v| imbv_loss(v[0], v[1], &masks))
        .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
}

#[test]
fn composite_recomposes_components() {
    let dims = [11, 11, 12];
    let t = phantom_labels(dims, 8);
    let masks = ImbvMasks::new(&[&t]).unwrap();
    let x = random(&[1, 1, 11, 11, 12], 9).map(|v| v + 0.05);
    let y = random(&[1, 1, 11, 11, 12], 10).map(|v| v + 0.05);
    let p = SsimParams::for_reference(&y);
    let w = LossWeights::default();
    let tape = Tape::new();
    let (yv, xv) = (tape.constant(y.clone()), tape.constant(x.clone()));
    let total = composite_loss(yv, xv, Some(&masks), &w, &p).unwrap();
    let mae = eval(mae_loss, &y, &x);
    let ssim = eval(|a, b| ssim_loss(a, b, &p), &y, &x);
    let sobel = eval(sobel_loss, &y, &x);
    let ib = eval(|a, b| imbv_loss(a, b, &masks), &y, &x);
    let hand = mae + 0.8 * ssim + 0.1 * sobel + 0.1 * ib;
    assert!((total.total.item().unwrap() - hand).abs() <= 1e-12);
    assert_eq!((total.mae, total.ssim, total.sobel, total.imbv), (mae, ssim, sobel, Some(ib)));

    let doubled = LossWeights { lambda_c: 0.2, ..w };
    let t2 = composite_loss(yv, xv, Some(&masks), &doubled, &p).unwrap();
    let delta = t2.total.item().unwrap() - total.total.item().unwrap();
    assert!((delta - 0.1 * ib).abs() <= 1e-12);

    let none = LossWeights { lambda_c: 0.0, ..w };
    let t0 = composite_loss(yv, xv, None, &none, &p).unwrap();
    assert!(t0.imbv.is_none());
    assert!((t0.total.item().unwrap() - (mae + 0.8 * ssim + 0.1 * sobel)).abs() <= 1e-12);
    assert!(composite_loss(yv, xv, None, &w, &p).is_err());

    let same = composite_loss(yv, yv, Some(&masks), &w, &p).unwrap();
    assert_eq!(same.total.item().unwrap(), 0.0);
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let dims = [11, 11, 11];
    let t = phantom_labels(dims, 11);
    let masks = ImbvMasks::new(&[&t]).unwrap();
    let x = random(&[1, 1, 11, 11, 11], 12).map(|v| v + 0.05);
    let y = random(&[1, 1, 11, 11, 11], 13).map(|v| v + 0.05);
    let p = SsimParams::for_reference(&y);
    let w = LossWeights::default();
    let report = GradCheck {
        max_coords: Some(200),
        ..GradCheck::default()
    }
    .run(&[x], |tape, v| {
        Ok(composite_loss(tape.constant(y.clone()), v[0], Some(&masks), &w, &p)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn losses_nonnegative_and_ssim_bounded(seed in 0u64..100_000, scale in 0.01f64..100.0) {
        let x = random(&[1, 1, 11, 11, 11], seed).map(|v| v * scale);
        // A noisy copy: non-negative and positively related, like an
        // estimate against its reference.
        let noise = random(&[1, 1, 11, 11, 11], seed + 1);
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(noise.data()).map(|(a, b)| 0.7 * a + 0.3 * scale * b).collect(),
        )
        .unwrap();
        let p = SsimParams::for_reference(&y);
        let s = eval(|a, b| ssim_3plane(a, b, &p), &y, &x);
        prop_assert!((0.0..=1.0).contains(&s), "{}", s);
        prop_assert!(eval(mae_loss, &y, &x) >= 0.0);
        prop_assert!(eval(sobel_loss, &y, &x) >= 0.0);
        prop_assert!(eval(|a, b| ssim_loss(a, b, &p), &y, &x) >= 0.0);
    }

    #[test]
    fn ssim_signed_inputs_bounded(seed in 0u64..100_000) {
        let x = random(&[1, 1, 11, 11, 11], seed).map(|v| 2.0 * v - 1.0);
        let y = random(&[1, 1, 11, 11, 11], seed + 1).map(|v| 1.0 - 2.0 * v);
        let p = SsimParams::with_range(2.0);
        let s = eval(|a, b| ssim_3plane(a, b, &p), &y, &x);
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
