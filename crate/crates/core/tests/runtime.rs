use pvckit::dataset::{generate_dataset, load_sample, read_manifest};
use pvckit::io::*;
use pvckit::losses::LossWeights;
use pvckit::metrics::case_metrics;
use pvckit::network::NetworkConfig;
use pvckit::phantom::{cohort, generate, PhantomSpec};
use pvckit::pvc::IyOptions;
use pvckit::train::*;
use pvckit::volume::{Label, TemplateSet, Volume};
use pvckit::Tensor;
use std::sync::OnceLock;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        network: NetworkConfig {
            filters: 2,
            dense_layers_per_block: 1,
            ..NetworkConfig::default()
        },
        batch_size: 2,
        max_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// Four compact phantom cases with iY labels, built once.
fn samples() -> &'static Vec<Sample> {
    static S: OnceLock<Vec<Sample>> = OnceLock::new();
    S.get_or_init(|| {
        cohort(&PhantomSpec { seed: 40, ..PhantomSpec::compact() }, 4)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, c)| Sample::from_case(format!("c{i}"), c, &IyOptions::default(), false).unwrap())
            .collect()
    })
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let before = p.clone();
    let mut st = AdamState::zeros_like(p.iter());
    for _ in 0..5 {
        adam_step(p.iter_mut(), &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 5);
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = [Tensor::scalar(0.0)];
    let mut st = AdamState::zeros_like(p.iter());
    let cfg = AdamConfig { lr: 0.1, ..Default::default() };
    adam_step(p.iter_mut(), &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
    // m_hat = 1, v_hat = 1, update = 0.1 / (1 + 1e-8).
    assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
}

#[test]
fn adam_descends_a_quadratic() {
    let target = [3.0, -1.0, 0.5, 2.0];
    let loss = |p: &Tensor| p.data().iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum::<f64>();
    let mut p = [Tensor::zeros(&[4])];
    let mut st = AdamState::zeros_like(p.iter());
    let cfg = AdamConfig { lr: 0.1, ..Default::default() };
    let mut prev = loss(&p[0]);
    for _ in 0..10 {
        let g = Tensor::new(vec![4], p[0].data().iter().zip(target).map(|(a, t)| 2.0 * (a - t)).collect()).unwrap();
        adam_step(p.iter_mut(), &[g], &mut st, &cfg).unwrap();
        let now = loss(&p[0]);
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn adam_shape_mismatch() {
    let mut p = [Tensor::zeros(&[2])];
    let mut st = AdamState::zeros_like(p.iter());
    let err = adam_step(p.iter_mut(), &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).unwrap_err();
    assert_eq!(err.kind(), "dimension");
    assert_eq!(st.step, 0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
        TrainConfig { beta2: 0.0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { use_ct: true, ..Default::default() },
    ] {
        assert_eq!(bad.validate().unwrap_err().kind(), "config");
    }
    let json = r#"{"batch_size": 3, "network": {"filters": 4}}"#;
    let cfg: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!((cfg.batch_size, cfg.network.filters, cfg.learning_rate), (3, 4, 1e-3));
    assert_eq!(cfg.loss, LossWeights::default());
}

#[test]
fn volume_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new([2, 3, 4], [4.0, 3.5, 2.0], (0..24).map(|i| i as f64 * 0.25).collect()).unwrap();
    write_volume(&dir.path().join("a"), &v).unwrap();
    assert_eq!(read_volume(&dir.path().join("a.json")).unwrap(), v);
    let labels: Vec<Label> = (0..24).map(|i| Label::ALL[i % 5]).collect();
    let t = TemplateSet::new([2, 3, 4], labels).unwrap();
    write_labels(&dir.path().join("l"), &t, v.spacing).unwrap();
    assert_eq!(read_labels(&dir.path().join("l")).unwrap(), t);
    let raw = std::fs::read(dir.path().join("a.raw")).unwrap();
    assert_eq!(raw.len(), 24 * 4);
    std::fs::write(dir.path().join("a.raw"), &raw[..raw.len() - 4]).unwrap();
    assert_eq!(read_volume(&dir.path().join("a")).unwrap_err().kind(), "format");
    assert_eq!(read_volume(&dir.path().join("l")).unwrap_err().kind(), "format");
    assert_eq!(read_labels(&dir.path().join("missing")).unwrap_err().kind(), "io");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut t = Trainer::new(&tiny_config()).unwrap();
    t.run_epoch(&samples()[..2], &samples()[2..3]).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.encode().unwrap();
    assert_eq!(&bytes[..4], b"PVCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.parameter_digest(), ck.parameter_digest());
    assert_eq!(back.encode().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pvck");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().parameter_digest(), ck.parameter_digest());

    let mut corrupt = bytes.clone();
    corrupt[100] ^= 1;
    assert_eq!(Checkpoint::decode(&corrupt).unwrap_err().kind(), "format");
    assert_eq!(Checkpoint::decode(b"NOPE0000").unwrap_err().kind(), "format");
}

#[test]
fn checkpoint_model_predicts_like_trainer() {
    let mut t = Trainer::new(&tiny_config()).unwrap();
    t.run_epoch(&samples()[..2], &[]).unwrap();
    let m = t.checkpoint().model().unwrap();
    let x = samples()[3].input_tensor().unwrap();
    assert_eq!(m.predict(&x).unwrap(), t.best_model().unwrap().predict(&x).unwrap());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let cfg = tiny_config();
    let (train, val) = (&samples()[..3], &samples()[3..]);
    let mut straight = Trainer::new(&cfg).unwrap();
    for _ in 0..3 {
        straight.run_epoch(train, val).unwrap();
    }
    let mut first = Trainer::new(&cfg).unwrap();
    first.run_epoch(train, val).unwrap();
    let bytes = first.checkpoint().encode().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    for _ in 0..2 {
        resumed.run_epoch(train, val).unwrap();
    }
    assert_eq!(resumed.progress, straight.progress);
    assert_eq!(resumed.checkpoint().parameter_digest(), straight.checkpoint().parameter_digest());
}

#[test]
fn fit_stops_and_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.pvck");
    let cfg = TrainConfig { max_epochs: 2, ..tiny_config() };
    let out = train(&cfg, &samples()[..2], &samples()[2..3], Some(&path)).unwrap();
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|e| e.validation.is_some() && e.train.imbv.is_some()));
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.config, cfg);
    let patient = TrainConfig { max_epochs: 50, patience: 0, ..tiny_config() };
    assert_eq!(train(&patient, &samples()[..2], &[], None).unwrap().log.len(), 1);
}

#[test]
fn lambda_c_selects_the_imbv_term() {
    let plain = TrainConfig {
        loss: LossWeights { lambda_c: 0.0, ..Default::default() },
        ..tiny_config()
    };
    let mut t = Trainer::new(&plain).unwrap();
    assert!(t.run_epoch(&samples()[..2], &[]).unwrap().train.imbv.is_none());
    let bv = TrainConfig { loss: LossWeights { lambda_c: 0.1, ..Default::default() }, ..tiny_config() };
    assert_eq!(bv.loss, LossWeights::default());
}

#[test]
fn empty_training_set_is_an_error() {
    let mut t = Trainer::new(&tiny_config()).unwrap();
    assert_eq!(t.run_epoch(&[], &[]).unwrap_err().kind(), "missing_data");
}

#[test]
fn single_case_overfit() {
    let cfg = TrainConfig {
        network: NetworkConfig { filters: 4, ..NetworkConfig::default() },
        learning_rate: 1e-2,
        batch_size: 1,
        max_epochs: 800,
        patience: 800,
        seed: 2,
        ..TrainConfig::default()
    };
    let one = &samples()[..1];
    let mut t = Trainer::new(&cfg).unwrap();
    let initial = t.mean_loss(one).unwrap().total;
    let mut best = initial;
    while !t.should_stop() && best >= 0.05 * initial {
        best = best.min(t.run_epoch(one, &[]).unwrap().train.total);
    }
    let last = t.mean_loss(one).unwrap().total.min(best);
    assert!(last < 0.05 * initial, "{last} vs initial {initial} after {} epochs", t.epoch());
}

#[test]
fn evaluation_rows() {
    let model = Trainer::new(&tiny_config()).unwrap().best_model().unwrap();
    let rows = evaluate(&model, &samples()[..2], true).unwrap();
    assert_eq!(rows.len(), 2 * 6);
    let s = &samples()[1];
    let net = predict_sample(&model, s).unwrap();
    let want = case_metrics(&s.id, METHOD_NETWORK, REF_TRUTH, s.truth.as_ref().unwrap(), &net, &s.templates, true).unwrap();
    assert!(rows.contains(&want));
    let self_row = rows.iter().find(|r| r.case_id == s.id && r.method == METHOD_IY && r.reference == REF_IY).unwrap();
    assert_eq!(self_row.rmse, 0.0);
    assert!((self_row.ssim - 1.0).abs() < 1e-12);
    assert_eq!(self_row.psnr_db, f64::INFINITY);
    let two = TrainConfig { use_ct: true, network: NetworkConfig { input_channels: 2, ..tiny_config().network }, ..tiny_config() };
    let m2 = Trainer::new(&two).unwrap().best_model().unwrap();
    assert_eq!(evaluate(&m2, &samples()[..1], true).unwrap_err().kind(), "config");
}

#[test]
fn non_pvc_overestimates_imbv_relative_to_iy() {
    let model = Trainer::new(&tiny_config()).unwrap().best_model().unwrap();
    let rows = evaluate(&model, samples(), true).unwrap();
    for s in samples() {
        let get = |m: &str| rows.iter().find(|r| r.case_id == s.id && r.method == m && r.reference == REF_TRUTH).unwrap().imbv;
        assert!(get(METHOD_NON_PVC) > get(METHOD_IY), "{}", s.id);
    }
}

#[test]
fn augmented_samples_stay_consistent() {
    let s = &samples()[0];
    let aug = s.augmented(90.0).unwrap();
    assert_eq!(aug.len(), 1 + 3 * 3);
    assert_eq!(aug[0].id, s.id);
    for a in &aug {
        assert_eq!(a.inputs.len(), 1);
        assert_eq!(a.label.dims, a.templates.dims);
        assert!(a.truth.is_some());
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { seed: 3, ..PhantomSpec::compact() };
    let m = generate_dataset(dir.path(), &spec, 2).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
    assert_eq!(m.cases, vec!["case_000", "case_001"]);
    let s = load_sample(&dir.path().join("case_001"), true, &IyOptions::default()).unwrap();
    let case = generate(&PhantomSpec { seed: 4, ..spec }).unwrap();
    assert_eq!(s.templates, case.templates);
    assert_eq!(s.inputs.len(), 2);
    let rel: f64 = s.inputs[0].data.iter().zip(&case.observed.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(rel < 1e-6);
    assert!(read_manifest(&dir.path().join("nothing")).is_err());
}

/// Mean |IMBV(net) - IMBV(iY label)| over the test cases of one seed.
fn imbv_error(lambda_c: f64, seed: u64) -> f64 {
    let cfg = TrainConfig {
        network: NetworkConfig { filters: 4, ..NetworkConfig::default() },
        loss: LossWeights { lambda_c, ..Default::default() },
        learning_rate: 5e-3,
        batch_size: 6,
        max_epochs: 30,
        patience: 30,
        seed,
        ..TrainConfig::default()
    };
    let s: Vec<Sample> = cohort(&PhantomSpec { seed: 700 + seed, ..PhantomSpec::compact() }, 10)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, c)| Sample::from_case(format!("c{i}"), c, &cfg.iy_options(), false).unwrap())
        .collect();
    let mut t = Trainer::new(&cfg).unwrap();
    t.fit(&s[..6], &s[6..7], None).unwrap();
    let rows = evaluate(&t.best_model().unwrap(), &s[7..], true).unwrap();
    let col = |m: &str| -> Vec<f64> {
        rows.iter().filter(|r| r.method == m && r.reference == REF_TRUTH).map(|r| r.imbv).collect()
    };
    let (net, iy) = (col(METHOD_NETWORK), col("iy"));
    assert_eq!(net.len(), 3);
    net.iter().zip(&iy).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0
}

#[test]
fn imbv_term_does_not_hurt_imbv_accuracy() {
    const TOL: f64 = 0.01;
    let seeds = [1u64, 2, 3];
    let with: f64 = seeds.iter().map(|&s| imbv_error(0.1, s)).sum::<f64>() / 3.0;
    let without: f64 = seeds.iter().map(|&s| imbv_error(0.0, s)).sum::<f64>() / 3.0;
    eprintln!("IMBV error with term {with:.4}, without {without:.4}");
    assert!(with <= without + TOL, "with {with} without {without}");
}
