//! Adam, supervised training with early stopping, checkpoints and
//! cohort evaluation.

use crate::dynconv::AttentionMode;
use crate::error::{PvcError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::losses::{composite_loss, ImbvMasks, LossWeights, SsimParams};
use crate::metrics::{case_metrics, CaseMetrics};
use crate::network::{Model, NetworkConfig};
use crate::phantom::{augment_rotations, PhantomCase};
use crate::pvc::{iy_correct, IyOptions};
use crate::tensor::{check_finite_enabled, Tensor};
use crate::volume::{TemplateSet, Volume};
use crate::Tape;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState { step: 0, m, v }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(PvcError::dim(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(PvcError::dim(
                "adam_step",
                format!("tensor {i}: param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), state.m[i].shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without a new best monitored loss before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Expand the training set with rotated copies.
    pub augment: bool,
    pub rotation_step_deg: f64,
    /// Feed the CT-like channel as a second input.
    pub use_ct: bool,
    /// Skip SSIM orientations thinner than the window.
    pub ssim_lenient: bool,
    /// Write a checkpoint every this many epochs (and at the end).
    pub checkpoint_every: usize,
    pub iy_iterations: usize,
    /// Relative train/validation/test weights for dataset splitting.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            batch_size: 6,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            augment: false,
            rotation_step_deg: 30.0,
            use_ct: false,
            ssim_lenient: false,
            checkpoint_every: 1,
            iy_iterations: 10,
            split: [15.0, 3.0, 10.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(PvcError::Config("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(PvcError::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PvcError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.epsilon > 0.0) {
            return Err(PvcError::Config("epsilon must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(PvcError::Config("checkpoint_every must be >= 1".into()));
        }
        let want = if self.use_ct { 2 } else { 1 };
        if self.network.input_channels != want {
            return Err(PvcError::Config(format!(
                "use_ct = {} needs {want} input channel(s), network has {}",
                self.use_ct, self.network.input_channels
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }

    pub fn iy_options(&self) -> IyOptions {
        IyOptions {
            iterations: self.iy_iterations,
            ..IyOptions::default()
        }
    }
}

/// One training or evaluation case.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// Network input channels: observed volume, then optionally CT.
    pub inputs: Vec<Volume>,
    /// Training target (the iY-corrected volume).
    pub label: Volume,
    pub templates: TemplateSet,
    /// Phantom ground truth, when known.
    pub truth: Option<Volume>,
}

impl Sample {
    pub fn from_case(id: impl Into<String>, case: &PhantomCase, iy: &IyOptions, use_ct: bool) -> Result<Sample> {
        let label = iy_correct(&case.observed, &case.templates, &case.spec.psf, iy)?.corrected;
        let mut inputs = vec![case.observed.clone()];
        if use_ct {
            inputs.push(case.ct.clone());
        }
        Ok(Sample {
            id: id.into(),
            inputs,
            label,
            templates: case.templates.clone(),
            truth: Some(case.truth.clone()),
        })
    }

    pub fn input_tensor(&self) -> Result<Tensor> {
        Volume::batch(&[self.inputs.iter().collect()])
    }

    /// Rotated copies (the sample itself first).
    pub fn augmented(&self, step_deg: f64) -> Result<Vec<Sample>> {
        let mut channels = self.inputs.clone();
        channels.push(self.label.clone());
        if let Some(t) = &self.truth {
            channels.push(t.clone());
        }
        let k = self.inputs.len();
        augment_rotations(&channels, &self.templates, step_deg)?
            .into_iter()
            .enumerate()
            .map(|(r, (mut ch, templates))| {
                let truth = self.truth.as_ref().map(|_| ch.pop().expect("truth channel"));
                let label = ch.pop().expect("label channel");
                debug_assert_eq!(ch.len(), k);
                Ok(Sample {
                    id: if r == 0 { self.id.clone() } else { format!("{}#r{r}", self.id) },
                    inputs: ch,
                    label,
                    templates,
                    truth,
                })
            })
            .collect()
    }
}

/// Mean loss components over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub total: f64,
    pub mae: f64,
    pub ssim: f64,
    pub sobel: f64,
    pub imbv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossLog,
    pub validation: Option<LossLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub best_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub log: Vec<EpochLog>,
}

/// Saved ChaCha8 stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub progress: Progress,
    pub epoch: u64,
    pub rng: RngState,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    /// Parameters at the best monitored loss; empty before the first epoch.
    pub best: Vec<Tensor>,
}

fn write_tensors(w: &mut ByteWriter, ts: &[Tensor]) {
    w.u32(ts.len() as u32);
    for t in ts {
        w.f64s(t.data());
    }
}

fn read_tensors(r: &mut ByteReader, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let n = r.u32()? as usize;
    if n != 0 && n != shapes.len() {
        return Err(PvcError::Format(format!("tensor section has {n} entries, expected {}", shapes.len())));
    }
    (0..n)
        .map(|i| {
            let len = shapes[i].iter().product();
            Tensor::new(shapes[i].clone(), r.f64s(len)?)
        })
        .collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.blob(&serde_json::to_vec(&self.config)?);
        w.blob(&serde_json::to_vec(&self.progress)?);
        w.u64(self.adam.step);
        w.u64(self.epoch);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.u32(self.params.len() as u32);
        for (name, t) in self.names.iter().zip(&self.params) {
            w.blob(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        write_tensors(&mut w, &self.adam.m);
        write_tensors(&mut w, &self.adam.v);
        write_tensors(&mut w, &self.best);
        let digest = Sha256::digest(&w.buf);
        w.bytes(&digest);
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 40 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(PvcError::Format("not a PVCK checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(PvcError::Format("checkpoint digest mismatch (corrupted file)".into()));
        }
        let mut r = ByteReader::new(body);
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PvcError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config: TrainConfig = serde_json::from_slice(r.blob()?)?;
        let progress: Progress = serde_json::from_slice(r.blob()?)?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let n = r.u32()? as usize;
        let mut names = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            names.push(
                String::from_utf8(r.blob()?.to_vec()).map_err(|e| PvcError::Format(format!("parameter name: {e}")))?,
            );
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            params.push(Tensor::new(shape, r.f64s(len)?)?);
        }
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        let m = read_tensors(&mut r, &shapes)?;
        let v = read_tensors(&mut r, &shapes)?;
        let best = read_tensors(&mut r, &shapes)?;
        if m.len() != n || v.len() != n {
            return Err(PvcError::Format("optimizer moments missing".into()));
        }
        if !r.done() {
            return Err(PvcError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            progress,
            epoch,
            rng,
            names,
            params,
            adam: AdamState { step, m, v },
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::decode(&std::fs::read(path)?)
    }

    /// SHA-256 (hex) over parameter names, shapes and values.
    pub fn parameter_digest(&self) -> String {
        digest_params(&self.names, &self.params)
    }

    /// Model carrying the best parameters (current ones if no best yet).
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::build(&self.config.network, self.config.seed)?;
        let src = if self.best.is_empty() { &self.params } else { &self.best };
        load_params(&mut model, &self.names, src)?;
        Ok(model)
    }
}

pub fn digest_params(names: &[String], params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for (n, t) in names.iter().zip(params) {
        h.update(n.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn load_params(model: &mut Model, names: &[String], values: &[Tensor]) -> Result<()> {
    if names.len() != model.params.len() {
        return Err(PvcError::Config(format!(
            "checkpoint has {} parameters, network expects {}",
            names.len(),
            model.params.len()
        )));
    }
    for (p, (name, t)) in model.params.iter_mut().zip(names.iter().zip(values)) {
        if &p.name != name || p.tensor.shape() != t.shape() {
            return Err(PvcError::Config(format!(
                "parameter {name} {:?} does not match network parameter {} {:?}",
                t.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor = t.clone();
    }
    Ok(())
}

fn batch_of<'a>(samples: &[&'a Sample]) -> Result<(Tensor, Tensor, Vec<&'a TemplateSet>)> {
    let x = Volume::batch(&samples.iter().map(|s| s.inputs.iter().collect()).collect::<Vec<_>>())?;
    let y = Volume::batch(&samples.iter().map(|s| vec![&s.label]).collect::<Vec<_>>())?;
    Ok((x, y, samples.iter().map(|s| &s.templates).collect()))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub progress: Progress,
    rng: ChaCha8Rng,
    best: Vec<Tensor>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::build(&config.network, config.seed)?;
        let adam = AdamState::zeros_like(model.params.iter().map(|p| &p.tensor));
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            progress: Progress::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9)),
            best: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        let mut t = Trainer::new(&ck.config)?;
        load_params(&mut t.model, &ck.names, &ck.params)?;
        t.adam = ck.adam.clone();
        t.progress = ck.progress.clone();
        t.rng = ck.rng.restore();
        t.best = ck.best.clone();
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.progress.log.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            progress: self.progress.clone(),
            epoch: self.epoch() as u64,
            rng: RngState::capture(&self.rng),
            names: self.model.params.iter().map(|p| p.name.clone()).collect(),
            params: self.model.params.iter().map(|p| p.tensor.clone()).collect(),
            adam: self.adam.clone(),
            best: self.best.clone(),
        }
    }

    fn ssim_params(&self, y: &Tensor) -> SsimParams {
        let p = SsimParams::for_reference(y);
        if self.config.ssim_lenient {
            p.lenient()
        } else {
            p
        }
    }

    /// Composite loss of one batch; returns the tape-free breakdown and,
    /// when `learn` is set, the parameter gradients.
    fn batch_loss(&self, batch: &[&Sample], learn: bool) -> Result<(LossLog, Option<Vec<Tensor>>)> {
        let (x, y, templates) = batch_of(batch)?;
        let masks = if self.config.loss.lambda_c != 0.0 {
            Some(ImbvMasks::new(&templates)?)
        } else {
            None
        };
        let tape = Tape::new();
        let params = self.model.params.bind(&tape, learn);
        let pred = self.model.forward(&params, tape.constant(x), AttentionMode::Learned)?;
        let p = self.ssim_params(&y);
        // A prediction whose blood pool is entirely zero has no IMBV; such a
        // batch is trained on the remaining terms.
        let mut weights = self.config.loss;
        if let Some(m) = &masks {
            let v = pred.value();
            let vol = v.len() / batch.len();
            let dead = m
                .blood_pool
                .iter()
                .enumerate()
                .any(|(i, bp)| bp.iter().all(|&j| v.data()[i * vol + j] == 0.0));
            if dead {
                debug!("IMBV term skipped: predicted blood pool is zero");
                weights.lambda_c = 0.0;
            }
        }
        let lb = composite_loss(tape.constant(y), pred, masks.as_ref(), &weights, &p)?;
        let log = LossLog {
            total: lb.total.item()?,
            mae: lb.mae,
            ssim: lb.ssim,
            sobel: lb.sobel,
            imbv: lb.imbv,
        };
        if !log.total.is_finite() {
            return Err(PvcError::NonFinite(format!(
                "composite loss {} at epoch {} (mae {}, ssim {}, sobel {}, imbv {:?}) for cases {:?}",
                log.total,
                self.epoch(),
                log.mae,
                log.ssim,
                log.sobel,
                log.imbv,
                batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>()
            )));
        }
        if !learn {
            return Ok((log, None));
        }
        let grads = params.gradients(&tape.backward(lb.total)?);
        if check_finite_enabled() {
            for (g, p) in grads.iter().zip(self.model.params.iter()) {
                if !g.all_finite() {
                    return Err(PvcError::NonFinite(format!("gradient of {} at epoch {}", p.name, self.epoch())));
                }
            }
        }
        Ok((log, Some(grads)))
    }

    /// Item-weighted mean loss over `samples` without updating anything.
    pub fn mean_loss(&self, samples: &[Sample]) -> Result<LossLog> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut acc = Accum::default();
        for chunk in refs.chunks(self.config.batch_size) {
            acc.add(&self.batch_loss(chunk, false)?.0, chunk.len());
        }
        acc.mean()
    }

    /// One pass over `train` in shuffled batches, then validation.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(PvcError::MissingData("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = Accum::default();
        let adam = self.config.adam();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (log, grads) = self.batch_loss(&batch, true)?;
            let grads = grads.expect("gradients requested");
            adam_step(self.model.params.iter_mut().map(|p| &mut p.tensor), &grads, &mut self.adam, &adam)?;
            acc.add(&log, batch.len());
            debug!("step {} loss {:.6}", self.adam.step, log.total);
        }
        let train_log = acc.mean()?;
        let validation = if val.is_empty() { None } else { Some(self.mean_loss(val)?) };
        let monitored = validation.map_or(train_log.total, |v| v.total);
        let entry = EpochLog {
            epoch: self.epoch() + 1,
            train: train_log,
            validation,
        };
        self.progress.log.push(entry.clone());
        if self.progress.best_loss.is_none_or(|b| monitored < b) {
            self.progress.best_loss = Some(monitored);
            self.progress.best_epoch = entry.epoch;
            self.progress.epochs_since_best = 0;
            self.best = self.model.params.iter().map(|p| p.tensor.clone()).collect();
        } else {
            self.progress.epochs_since_best += 1;
        }
        info!(
            "epoch {} train {:.6} val {}",
            entry.epoch,
            train_log.total,
            validation.map_or("-".to_string(), |v| format!("{:.6}", v.total))
        );
        Ok(entry)
    }

    pub fn should_stop(&self) -> bool {
        let e = self.epoch();
        e >= self.config.max_epochs || (e > 0 && self.progress.epochs_since_best >= self.config.patience)
    }

    /// Trains until early stopping or the epoch cap, checkpointing to
    /// `checkpoint` when given. With `augment`, the training set is expanded
    /// by rotations first.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], checkpoint: Option<&Path>) -> Result<()> {
        let expanded;
        let train = if self.config.augment {
            expanded = train
                .iter()
                .map(|s| s.augmented(self.config.rotation_step_deg))
                .collect::<Result<Vec<_>>>()?
                .concat();
            &expanded[..]
        } else {
            train
        };
        while !self.should_stop() {
            self.run_epoch(train, val)?;
            if let Some(path) = checkpoint {
                if self.epoch().is_multiple_of(self.config.checkpoint_every) || self.should_stop() {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    }

    /// Model with the best parameters seen so far.
    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        if !self.best.is_empty() {
            let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
            load_params(&mut m, &names, &self.best)?;
        }
        Ok(m)
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    total: f64,
    mae: f64,
    ssim: f64,
    sobel: f64,
    imbv: Option<f64>,
    imbv_n: usize,
}

impl Accum {
    fn add(&mut self, l: &LossLog, k: usize) {
        let k = k as f64;
        self.n += k as usize;
        self.total += k * l.total;
        self.mae += k * l.mae;
        self.ssim += k * l.ssim;
        self.sobel += k * l.sobel;
        if let Some(i) = l.imbv {
            *self.imbv.get_or_insert(0.0) += k * i;
            self.imbv_n += k as usize;
        }
    }

    fn mean(&self) -> Result<LossLog> {
        if self.n == 0 {
            return Err(PvcError::MissingData("no samples".into()));
        }
        let n = self.n as f64;
        Ok(LossLog {
            total: self.total / n,
            mae: self.mae / n,
            ssim: self.ssim / n,
            sobel: self.sobel / n,
            imbv: self.imbv.map(|v| v / self.imbv_n as f64),
        })
    }
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn train(config: &TrainConfig, train: &[Sample], val: &[Sample], checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config)?;
    t.fit(train, val, checkpoint)?;
    Ok(TrainOutcome {
        model: t.best_model()?,
        checkpoint: t.checkpoint(),
        log: t.progress.log.clone(),
    })
}

pub const METHOD_NON_PVC: &str = "non_pvc";
pub const METHOD_IY: &str = "iy";
pub const METHOD_NETWORK: &str = "network";
pub const REF_TRUTH: &str = "truth";
pub const REF_IY: &str = "iy";

pub fn predict_sample(model: &Model, s: &Sample) -> Result<Volume> {
    if s.inputs.len() != model.config.input_channels {
        return Err(PvcError::Config(format!(
            "case {} has {} input channel(s), network expects {}",
            s.id,
            s.inputs.len(),
            model.config.input_channels
        )));
    }
    let y = model.predict(&s.input_tensor()?)?;
    Ok(Volume::unbatch(&y, s.label.spacing)?.remove(0))
}

/// Rows for the observed input, the iY label and the network output,
/// against the phantom truth (when known) and against the iY label.
pub fn evaluate(model: &Model, samples: &[Sample], heart_only: bool) -> Result<Vec<CaseMetrics>> {
    let mut rows = Vec::new();
    for s in samples {
        let pred = predict_sample(model, s)?;
        let methods = [(METHOD_NON_PVC, &s.inputs[0]), (METHOD_IY, &s.label), (METHOD_NETWORK, &pred)];
        let mut refs = Vec::new();
        if let Some(t) = &s.truth {
            refs.push((REF_TRUTH, t));
        }
        refs.push((REF_IY, &s.label));
        for (rname, reference) in &refs {
            for (mname, x) in &methods {
                rows.push(case_metrics(&s.id, mname, rname, reference, x, &s.templates, heart_only)?);
            }
        }
    }
    Ok(rows)
}
