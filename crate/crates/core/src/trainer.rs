//! The training loop: two views per item, encoder, quantization head,
//! cross-quantized contrastive loss, Adam with a cosine schedule, and the
//! `SPQM` checkpoint format.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::{make_view_pair, AugmentConfig, Image};
use crate::cqc_loss::{loss_backward, CqcConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::kmeans_pq_baseline;
use crate::numerics::{norm, read_tensor_from, write_tensor_to, Rng, Tensor};
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::pq_head::{hard_assign, hard_quantize_backward, reconstruct, soft_quantize, soft_quantize_backward, CodebookSet};

pub const SPQM_MAGIC: &[u8; 4] = b"SPQM";
const SPQM_VERSION: u16 = 1;

// Stream tags for `Rng::derive`.
const TAG_SHUFFLE: u64 = 0x5348;
const TAG_AUGMENT: u64 = 0x4147;
const TAG_ENCODER_INIT: u64 = 0x454E;
const TAG_CODEBOOK_INIT: u64 = 0x4342;

const KMEANS_INIT_ITERS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Encoder and quantization head trained together.
    Joint,
    /// Passthrough encoder; only the codebooks learn.
    HeadOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Spq,
    /// Contrast quantized against quantized descriptors.
    SpqC,
    /// Hard quantization with straight-through gradients.
    SpqH,
    /// A single codebook (flat vector quantization).
    SpqQ,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::HeadOnly => "head-only",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "head-only" => Ok(Mode::HeadOnly),
            _ => Err(Error::Config(format!("unknown mode `{s}` (joint|head-only)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Spq => "spq",
            Ablation::SpqC => "spq_c",
            Ablation::SpqH => "spq_h",
            Ablation::SpqQ => "spq_q",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spq" => Ok(Ablation::Spq),
            "spq_c" => Ok(Ablation::SpqC),
            "spq_h" => Ok(Ablation::SpqH),
            "spq_q" => Ok(Ablation::SpqQ),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (spq|spq_c|spq_h|spq_q)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub base_lr: f64,
    pub tau_q: f64,
    pub cqc: CqcConfig,
    pub m: usize,
    pub k: usize,
    pub d: usize,
    pub mode: Mode,
    pub ablation: Ablation,
    pub seed: u64,
    /// L2-normalize descriptors before the quantization head.
    pub normalize_descriptors: bool,
    /// Warm-start codebooks with k-means on the initial descriptors.
    pub kmeans_init: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 50,
            base_lr: 1e-3,
            tau_q: 0.2,
            cqc: CqcConfig::default(),
            m: 8,
            k: 16,
            d: 128,
            mode: Mode::Joint,
            ablation: Ablation::Spq,
            seed: 0,
            normalize_descriptors: false,
            kmeans_init: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Codebook count actually used: the flat-VQ ablation forces one.
    pub fn effective_m(&self) -> usize {
        if self.ablation == Ablation::SpqQ {
            1
        } else {
            self.m
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.effective_m();
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if m == 0 || self.d == 0 || self.d % m != 0 {
            return Err(Error::Config(format!("d={} is not divisible by m={m}", self.d)));
        }
        if !self.k.is_power_of_two() {
            return Err(Error::Config(format!("k={} is not a power of two", self.k)));
        }
        if !(self.tau_q > 0.0) || !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::Config("tau_q must be > 0 and base_lr >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps > 0".into()));
        }
        self.cqc.validate()
    }

    /// Resolved `key=value` pairs, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("tau_q", self.tau_q.to_string()),
            ("tau_cqc", self.cqc.tau_cqc.to_string()),
            ("include_positive", self.cqc.include_positive_in_denominator.to_string()),
            ("m", self.m.to_string()),
            ("k", self.k.to_string()),
            ("d", self.d.to_string()),
            ("mode", self.mode.to_string()),
            ("ablation", self.ablation.to_string()),
            ("seed", self.seed.to_string()),
            ("normalize_descriptors", self.normalize_descriptors.to_string()),
            ("kmeans_init", self.kmeans_init.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
        ]
    }

    /// Applies one key; `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "tau_q" => self.tau_q = parse_value(key, value)?,
            "tau_cqc" => self.cqc.tau_cqc = parse_value(key, value)?,
            "include_positive" => self.cqc.include_positive_in_denominator = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "normalize_descriptors" => self.normalize_descriptors = parse_value(key, value)?,
            "kmeans_init" => self.kmeans_init = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One optimizer step's record in the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.lr, self.loss)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub codebooks: CodebookSet,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<LossRecord>,
}

/// Training items: raw images to augment, or precomputed descriptor views.
#[derive(Clone, Copy, Debug)]
pub enum TrainingData<'a> {
    Images { images: &'a [Image], augment: &'a AugmentConfig },
    ViewPairs { first: &'a Tensor<f64>, second: &'a Tensor<f64> },
}

impl TrainingData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainingData::Images { images, .. } => images.len(),
            TrainingData::ViewPairs { first, .. } => first.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        match self {
            TrainingData::Images { augment, .. } => augment.validate(),
            TrainingData::ViewPairs { first, second } => {
                if first.shape() != second.shape() || first.rank() != 2 {
                    return Err(Error::Input(format!(
                        "view pairs must be two [N, D] tensors of equal shape, got {:?} and {:?}",
                        first.shape(),
                        second.shape()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Interleaved encoder input for `items`: row `2n` is the first view of
    /// `items[n]`, row `2n + 1` its second view.
    fn batch(&self, items: &[usize], seed: u64, epoch: u64) -> Result<Tensor<f64>> {
        match self {
            TrainingData::ViewPairs { first, second } => {
                let d = first.row_len();
                let mut data = Vec::with_capacity(2 * items.len() * d);
                for &i in items {
                    data.extend_from_slice(first.row(i));
                    data.extend_from_slice(second.row(i));
                }
                Tensor::new_unchecked_values(vec![2 * items.len(), d], data)
            }
            TrainingData::Images { images, augment } => {
                let views: Vec<(Image, Image)> = items
                    .par_iter()
                    .map(|&i| {
                        let mut ra = Rng::derive(seed, &[TAG_AUGMENT, epoch, i as u64, 0]);
                        let mut rb = Rng::derive(seed, &[TAG_AUGMENT, epoch, i as u64, 1]);
                        make_view_pair(&images[i], augment, &mut ra, &mut rb)
                    })
                    .collect::<Result<_>>()?;
                let flat: Vec<Image> = views.into_iter().flat_map(|(a, b)| [a, b]).collect();
                Image::batch_to_tensor(&flat)
            }
        }
    }

    /// Un-augmented encoder input for every item (first views for
    /// descriptor data).
    fn plain_inputs(&self) -> Result<Tensor<f64>> {
        match self {
            TrainingData::ViewPairs { first, .. } => Ok((*first).clone()),
            TrainingData::Images { images, augment } => {
                let (h, w) = augment.output_size;
                if images.iter().any(|im| (im.height(), im.width()) != (h, w)) {
                    return Err(Error::Config(
                        "k-means initialisation needs images already at the output size".into(),
                    ));
                }
                Image::batch_to_tensor(images)
            }
        }
    }
}

impl TrainState {
    /// Fresh state around a given encoder.
    pub fn new(cfg: &TrainConfig, encoder: Encoder) -> Result<Self> {
        cfg.validate()?;
        if encoder.output_dim() != cfg.d {
            return Err(Error::Config(format!(
                "encoder produces {} dims, config says d={}",
                encoder.output_dim(),
                cfg.d
            )));
        }
        let m = cfg.effective_m();
        let mut rng = Rng::derive(cfg.seed, &[TAG_CODEBOOK_INIT]);
        let codebooks = CodebookSet::random(m, cfg.k, cfg.d / m, &mut rng)?;
        Ok(Self::assemble(cfg, encoder, codebooks))
    }

    fn assemble(cfg: &TrainConfig, encoder: Encoder, codebooks: CodebookSet) -> Self {
        let mut sizes: Vec<usize> = encoder.params().iter().map(|p| p.len()).collect();
        sizes.push(codebooks.codewords().len());
        Self {
            encoder,
            codebooks,
            adam: AdamState::with_hyper(&sizes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Fresh state with the encoder implied by the mode and data: the small
    /// CNN for joint training on images, a passthrough otherwise.
    pub fn initialize(cfg: &TrainConfig, data: &TrainingData<'_>) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let encoder = match (cfg.mode, data) {
            (Mode::Joint, TrainingData::Images { augment, .. }) => {
                let (h, w) = augment.output_size;
                let mut rng = Rng::derive(cfg.seed, &[TAG_ENCODER_INIT]);
                Encoder::small_cnn(h, w, cfg.d, &mut rng)?
            }
            (Mode::Joint, TrainingData::ViewPairs { .. }) => {
                return Err(Error::Config("joint mode needs image data; use head-only for descriptors".into()))
            }
            (Mode::HeadOnly, TrainingData::ViewPairs { first, .. }) => {
                if first.row_len() != cfg.d {
                    return Err(Error::Config(format!(
                        "descriptors have {} dims, config says d={}",
                        first.row_len(),
                        cfg.d
                    )));
                }
                Encoder::passthrough(cfg.d)
            }
            (Mode::HeadOnly, TrainingData::Images { .. }) => {
                return Err(Error::Config("head-only mode needs descriptor view pairs".into()))
            }
        };
        let mut state = Self::new(cfg, encoder)?;
        if cfg.kmeans_init {
            let mut descriptors = state.encoder.encode(&data.plain_inputs()?)?;
            if cfg.normalize_descriptors {
                descriptors = normalize_rows(&descriptors)?.0;
            }
            let m = cfg.effective_m();
            let cb = kmeans_pq_baseline(&descriptors, m, cfg.k, KMEANS_INIT_ITERS, cfg.seed)?;
            state = Self::assemble(cfg, state.encoder, cb);
        }
        Ok(state)
    }

    /// Descriptors as fed to the quantization head (normalized if the
    /// config says so).
    pub fn descriptors(&self, cfg: &TrainConfig, inputs: &Tensor<f64>) -> Result<Tensor<f64>> {
        let x = self.encoder.encode(inputs)?;
        if cfg.normalize_descriptors {
            Ok(normalize_rows(&x)?.0)
        } else {
            Ok(x)
        }
    }
}

/// Unit rows and the original norms.
fn normalize_rows(x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<f64>)> {
    let d = x.row_len();
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.rows());
    for (i, r) in x.iter_rows().enumerate() {
        let n = norm(r);
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!("descriptor {i} has zero norm")));
        }
        out.extend(r.iter().map(|v| v / n));
        norms.push(n);
    }
    Ok((Tensor::new_unchecked_values(vec![x.rows(), d], out)?, norms))
}

/// Gradient through `y = x / |x|`: `(g - (g·y) y) / |x|`.
fn normalize_backward(y: &Tensor<f64>, norms: &[f64], g: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut out = Vec::with_capacity(g.len());
    for (i, (yr, gr)) in y.iter_rows().zip(g.iter_rows()).enumerate() {
        let gy: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - gy * yv) / norms[i]));
    }
    Tensor::new_unchecked_values(g.shape().to_vec(), out)
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new_unchecked_values(a.shape().to_vec(), data)
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// One optimizer step on an interleaved two-view batch `[2N, ...]`.
/// `batch_index` only feeds diagnostics.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    inputs: &Tensor<f64>,
    total_steps: u64,
    batch_index: usize,
) -> Result<LossRecord> {
    let (raw, tape) = state.encoder.forward(inputs)?;
    let (x, norms) = if cfg.normalize_descriptors {
        let (y, n) = normalize_rows(&raw)?;
        (y, Some(n))
    } else {
        (raw, None)
    };

    let cb = &state.codebooks;
    let (z, soft_tape, codes) = if cfg.ablation == Ablation::SpqH {
        let codes = hard_assign(cb, &x)?;
        (reconstruct(cb, &codes)?, None, Some(codes))
    } else {
        let (z, t) = soft_quantize(cb, &x, cfg.tau_q)?;
        (z, Some(t), None)
    };

    let contrast_quantized = cfg.ablation == Ablation::SpqC;
    let anchors = if contrast_quantized { &z } else { &x };
    let lg = loss_backward(anchors, &z, &cfg.cqc)?;
    if !lg.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: batch_index,
            max_abs_grad: max_abs(lg.anchors.data()).max(max_abs(lg.targets.data())),
        });
    }

    let grad_z = if contrast_quantized {
        add(&lg.targets, &lg.anchors)?
    } else {
        lg.targets.clone()
    };
    let (grad_c, grad_x_q) = match (soft_tape, codes) {
        (Some(t), _) => soft_quantize_backward(t, cb, &x, &grad_z)?,
        (None, Some(codes)) => hard_quantize_backward(cb, &codes, &grad_z)?,
        (None, None) => unreachable!("one quantizer always runs"),
    };
    let grad_x = if contrast_quantized {
        grad_x_q
    } else {
        add(&lg.anchors, &grad_x_q)?
    };

    let mut grads = if state.encoder.is_passthrough() {
        Vec::new()
    } else {
        let grad_raw = match &norms {
            Some(n) => normalize_backward(&x, n, &grad_x)?,
            None => grad_x,
        };
        state.encoder.backward(tape, &grad_raw)?.params
    };
    grads.push(grad_c.into_data());
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            batch: batch_index,
            max_abs_grad: grads.iter().map(|g| max_abs(g)).fold(0.0, f64::max),
        });
    }

    let lr = cosine_lr(state.step, total_steps, cfg.base_lr);
    {
        let TrainState { encoder, codebooks, adam, .. } = state;
        let mut params = encoder.params_mut();
        params.push(codebooks.codewords_mut());
        adam_step(&mut params, &grads, adam, lr)?;
    }
    let record = LossRecord {
        epoch: state.epoch,
        step: state.step,
        lr,
        loss: lg.loss,
    };
    state.step += 1;
    state.history.push(record);
    Ok(record)
}

/// Full batches per epoch (the partial last batch is dropped).
pub fn batches_per_epoch(cfg: &TrainConfig, data: &TrainingData<'_>) -> u64 {
    (data.len() / cfg.batch_size) as u64
}

/// One pass over the data in a freshly shuffled order; returns the epoch's
/// mean loss. `on_step` sees every step's record.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<f64> {
    data.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} items, fewer than batch_size={}",
            data.len(),
            cfg.batch_size
        )));
    }
    let batches = batches_per_epoch(cfg, data);
    let total_steps = cfg.epochs.max(1) * batches;
    let order = Rng::derive(cfg.seed, &[TAG_SHUFFLE, state.epoch]).permutation(data.len());
    let mut sum = 0.0;
    for (b, items) in order.chunks_exact(cfg.batch_size).enumerate() {
        let inputs = data.batch(items, cfg.seed, state.epoch)?;
        let record = train_step(state, cfg, &inputs, total_steps, b)?;
        on_step(&record);
        sum += record.loss;
    }
    state.epoch += 1;
    Ok(sum / batches as f64)
}

/// Trains until `cfg.epochs` epochs are complete; returns per-epoch mean
/// losses of the epochs run by this call.
pub fn fit(
    state: &mut TrainState,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<f64>> {
    let mut means = Vec::new();
    while state.epoch < cfg.epochs {
        means.push(train_epoch(state, data, cfg, on_step)?);
    }
    Ok(means)
}

/// A saved training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let st = &self.state;
        let mut text = String::new();
        for (k, v) in self.config.entries() {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&format!("encoder={}\n", st.encoder.architecture()));
        text.push_str(&format!("epoch={}\nstep={}\nadam_step={}\n", st.epoch, st.step, st.adam.step));

        w.write_all(SPQM_MAGIC)?;
        w.write_all(&SPQM_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;

        let mut tensors: Vec<Tensor<f64>> = Vec::new();
        let flat = |v: &[f64]| Tensor::new_unchecked_values(vec![v.len()], v.to_vec());
        for p in st.encoder.params() {
            tensors.push(flat(p)?);
        }
        tensors.push(st.codebooks.to_tensor());
        for m in &st.adam.m {
            tensors.push(flat(m)?);
        }
        for v in &st.adam.v {
            tensors.push(flat(v)?);
        }
        let hist: Vec<f64> = st
            .history
            .iter()
            .flat_map(|r| [r.epoch as f64, r.step as f64, r.lr, r.loss])
            .collect();
        tensors.push(Tensor::new_unchecked_values(vec![st.history.len(), 4], hist)?);

        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in &tensors {
            write_tensor_to(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let corrupt = |what: &str| Error::Format(format!("bad checkpoint: {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != SPQM_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(|_| corrupt("truncated header"))?;
        let version = u16::from_le_bytes(b2);
        if version != SPQM_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| corrupt("truncated header"))?;
        let mut text = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut text).map_err(|_| corrupt("truncated config"))?;
        let text = String::from_utf8(text).map_err(|_| corrupt("config is not UTF-8"))?;

        let mut config = TrainConfig::default();
        let (mut arch, mut epoch, mut step, mut adam_step_count) = (None, None, None, None);
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(line))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| corrupt(line));
            match k {
                "encoder" => arch = Some(v.to_string()),
                "epoch" => epoch = Some(num(v)?),
                "step" => step = Some(num(v)?),
                "adam_step" => adam_step_count = Some(num(v)?),
                _ => {
                    if !config.set(k, v).map_err(|e| corrupt(&e.to_string()))? {
                        return Err(corrupt(&format!("unknown key `{k}`")));
                    }
                }
            }
        }
        config.validate().map_err(|e| corrupt(&e.to_string()))?;
        let missing = |k: &str| corrupt(&format!("missing `{k}`"));
        let mut encoder = Encoder::from_architecture(&arch.ok_or_else(|| missing("encoder"))?)?;

        r.read_exact(&mut b4).map_err(|_| corrupt("truncated tensor count"))?;
        let count = u32::from_le_bytes(b4) as usize;
        let n_params = encoder.params().len();
        if count != 3 * (n_params + 1) + 1 {
            return Err(corrupt(&format!("{count} tensors for {n_params} encoder arrays")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(read_tensor_from::<f64, _>(r)?);
        }
        let mut it = tensors.into_iter();
        for p in encoder.params_mut() {
            let t = it.next().expect("counted");
            if t.len() != p.len() {
                return Err(corrupt("encoder parameter size"));
            }
            p.copy_from_slice(t.data());
        }
        let codebooks = CodebookSet::from_tensor(&it.next().expect("counted"))?;
        if codebooks.m() != config.effective_m() || codebooks.k() != config.k || codebooks.dim() != config.d {
            return Err(corrupt("codebook shape disagrees with config"));
        }
        let mut sizes: Vec<usize> = encoder.params().iter().map(|p| p.len()).collect();
        sizes.push(codebooks.codewords().len());
        let mut adam = AdamState::with_hyper(&sizes, config.adam_beta1, config.adam_beta2, config.adam_eps);
        adam.step = adam_step_count.ok_or_else(|| missing("adam_step"))?;
        for moments in [&mut adam.m, &mut adam.v] {
            for dst in moments.iter_mut() {
                let t = it.next().expect("counted");
                if t.len() != dst.len() {
                    return Err(corrupt("optimizer moment size"));
                }
                dst.copy_from_slice(t.data());
            }
        }
        let hist = it.next().expect("counted");
        if hist.rank() != 2 || hist.row_len() != 4 {
            return Err(corrupt("loss history shape"));
        }
        let history = hist
            .iter_rows()
            .map(|r| LossRecord {
                epoch: r[0] as u64,
                step: r[1] as u64,
                lr: r[2],
                loss: r[3],
            })
            .collect();
        Ok(Self {
            config,
            state: TrainState {
                encoder,
                codebooks,
                adam,
                epoch: epoch.ok_or_else(|| missing("epoch"))?,
                step: step.ok_or_else(|| missing("step"))?,
                history,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let ck = Self::read_from(&mut r)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticSource, SyntheticSpec};

    fn synthetic(clusters: usize, dim: usize, per: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let src = SyntheticSource::new(SyntheticSpec {
            clusters,
            dim,
            noise: 0.1,
            seed,
        })
        .unwrap();
        let s = src.sample(per, 0).unwrap();
        (s.view_a, s.view_b)
    }

    fn head_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs: 3,
            base_lr: 1e-2,
            m: 4,
            k: 16,
            d: 16,
            mode: Mode::HeadOnly,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_images(n: usize) -> Vec<Image> {
        let mut rng = Rng::new(11, 0);
        (0..n)
            .map(|_| Image::new(8, 8, (0..8 * 8 * 3).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap())
            .collect()
    }

    fn image_cfg() -> (TrainConfig, AugmentConfig) {
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            m: 2,
            k: 4,
            d: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let aug = AugmentConfig {
            output_size: (8, 8),
            ..AugmentConfig::default()
        };
        (cfg, aug)
    }

    #[test]
    fn config_entries_round_trip() {
        let cfg = TrainConfig {
            base_lr: 0.1 + 0.2,
            ablation: Ablation::SpqC,
            ..head_cfg()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.entries() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("nonsense", "1").unwrap());
        assert!(back.set("mode", "sideways").is_err());
    }

    #[test]
    fn spq_q_forces_one_codebook() {
        let cfg = TrainConfig {
            ablation: Ablation::SpqQ,
            ..head_cfg()
        };
        assert_eq!(cfg.effective_m(), 1);
        let state = TrainState::new(&cfg, Encoder::passthrough(16)).unwrap();
        assert_eq!(state.codebooks.m(), 1);
        assert_eq!(state.codebooks.subdim(), 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { d: 10, ..head_cfg() },
            TrainConfig { k: 12, ..head_cfg() },
            TrainConfig { batch_size: 1, ..head_cfg() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (a, b) = synthetic(4, 16, 16, 1);
        let data = TrainingData::ViewPairs { first: &a, second: &b };
        let cfg = TrainConfig { base_lr: 0.0, ..head_cfg() };
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let before = state.codebooks.clone();
        train_epoch(&mut state, &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(state.codebooks, before);

        let images = tiny_images(8);
        let (icfg, aug) = image_cfg();
        let icfg = TrainConfig { base_lr: 0.0, ..icfg };
        let data = TrainingData::Images { images: &images, augment: &aug };
        let mut state = TrainState::initialize(&icfg, &data).unwrap();
        let (enc, cb) = (state.encoder.clone(), state.codebooks.clone());
        train_epoch(&mut state, &data, &icfg, &mut |_| {}).unwrap();
        assert_eq!(state.encoder, enc);
        assert_eq!(state.codebooks, cb);
    }

    #[test]
    fn runs_are_deterministic() {
        let images = tiny_images(8);
        let (cfg, aug) = image_cfg();
        let data = TrainingData::Images { images: &images, augment: &aug };
        let run = || {
            let mut state = TrainState::initialize(&cfg, &data).unwrap();
            fit(&mut state, &data, &cfg, &mut |_| {}).unwrap();
            state
        };
        let (s1, s2) = (run(), run());
        let bits = |s: &TrainState| s.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s1), bits(&s2));
        assert_eq!(s1, s2);
        assert_eq!(s1.history.len(), 4);
    }

    #[test]
    fn joint_training_moves_encoder_and_codebooks() {
        let images = tiny_images(8);
        let (cfg, aug) = image_cfg();
        let data = TrainingData::Images { images: &images, augment: &aug };
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let (enc, cb) = (state.encoder.clone(), state.codebooks.clone());
        train_epoch(&mut state, &data, &cfg, &mut |_| {}).unwrap();
        assert_ne!(state.encoder, enc);
        assert_ne!(state.codebooks, cb);
    }

    #[test]
    fn learning_rate_follows_cosine_schedule() {
        let (a, b) = synthetic(4, 16, 16, 1);
        let data = TrainingData::ViewPairs { first: &a, second: &b };
        let cfg = head_cfg();
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let mut lrs = Vec::new();
        fit(&mut state, &data, &cfg, &mut |r| lrs.push((r.step, r.lr))).unwrap();
        let total = 3 * 2;
        assert_eq!(lrs.len(), total as usize);
        for (s, lr) in lrs {
            assert_eq!(lr, cosine_lr(s, total, cfg.base_lr));
        }
    }

    #[test]
    fn synthetic_loss_decreases() {
        // 8 clusters, head-only: epoch-mean loss strictly decreases over the
        // first 10 epochs, and the final epoch mean sits at least 30% below
        // the loss of the untrained model (the first step's loss).
        let (a, b) = synthetic(8, 32, 256, 5);
        let data = TrainingData::ViewPairs { first: &a, second: &b };
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 50,
            base_lr: 3e-4,
            m: 2,
            d: 32,
            mode: Mode::HeadOnly,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let means = fit(&mut state, &data, &cfg, &mut |_| {}).unwrap();
        for w in means[..10].windows(2) {
            assert!(w[1] < w[0], "{means:?}");
        }
        let initial = state.history[0].loss;
        let last = *means.last().unwrap();
        assert!(last <= 0.7 * initial, "initial {initial}, last {last}");
    }

    #[test]
    fn hard_forward_is_soft_limit() {
        // Descriptors near a codeword in every subspace, so the nearest
        // codeword wins by a clear margin.
        let mut rng = Rng::new(2, 0);
        let cb = CodebookSet::random(4, 16, 4, &mut rng).unwrap();
        let mut x = Vec::new();
        for _ in 0..32 {
            for m in 0..4 {
                let k = rng.below(16);
                x.extend(cb.codeword(m, k).iter().map(|v| v + rng.normal(0.0, 0.01)));
            }
        }
        let x = Tensor::new(vec![32, 16], x).unwrap();
        let hard = reconstruct(&cb, &hard_assign(&cb, &x).unwrap()).unwrap();
        let err = |tau: f64| {
            let soft = soft_quantize(&cb, &x, tau).unwrap().0;
            max_abs(&soft.data().iter().zip(hard.data()).map(|(a, b)| a - b).collect::<Vec<_>>())
        };
        let errs: Vec<f64> = [1e-1, 1e-2, 1e-3].iter().map(|&t| err(t)).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
        assert!(errs[2] <= 1e-4, "{errs:?}");
    }

    #[test]
    fn hard_ablation_trains() {
        let (a, b) = synthetic(4, 16, 16, 1);
        let data = TrainingData::ViewPairs { first: &a, second: &b };
        for ablation in [Ablation::SpqH, Ablation::SpqC, Ablation::SpqQ] {
            let cfg = TrainConfig { ablation, ..head_cfg() };
            let mut state = TrainState::initialize(&cfg, &data).unwrap();
            let before = state.codebooks.clone();
            fit(&mut state, &data, &cfg, &mut |_| {}).unwrap();
            assert_ne!(state.codebooks, before, "{ablation}");
            assert!(state.history.iter().all(|r| r.loss.is_finite()));
        }
    }

    #[test]
    fn quantized_sub_blocks_are_not_normalized() {
        let mut rng = Rng::new(9, 0);
        let cb = CodebookSet::random(4, 16, 4, &mut rng).unwrap();
        let x = Tensor::new(vec![8, 16], (0..128).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let z = soft_quantize(&cb, &x, 0.2).unwrap().0;
        let norms: Vec<f64> = z.iter_rows().flat_map(|r| r.chunks(4).map(norm).collect::<Vec<_>>()).collect();
        let spread = norms.iter().cloned().fold(f64::MIN, f64::max) - norms.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1, "{norms:?}");
        assert!(norms.iter().any(|n| (n - 1.0).abs() > 1e-3));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = Rng::new(4, 0);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let g = Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let f = |x: &Tensor<f64>| -> f64 {
            normalize_rows(x).unwrap().0.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (y, n) = normalize_rows(&x).unwrap();
        let analytic = normalize_backward(&y, &n, &g).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut q = x.clone();
            q.data_mut()[i] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - analytic.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (a, b) = synthetic(4, 16, 16, 1);
        let data = TrainingData::ViewPairs { first: &a, second: &b };
        let mut cfg = head_cfg();
        cfg.cqc.tau_cqc = 1e-310;
        let mut state = TrainState::initialize(&cfg, &data).unwrap();
        let err = train_epoch(&mut state, &data, &cfg, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { batch: 0, .. }), "{err}");
    }

    #[test]
    fn checkpoint_resume_is_bitwise_identical() {
        let images = tiny_images(8);
        let (cfg, aug) = image_cfg();
        let cfg = TrainConfig { epochs: 3, ..cfg };
        let data = TrainingData::Images { images: &images, augment: &aug };

        let mut straight = TrainState::initialize(&cfg, &data).unwrap();
        fit(&mut straight, &data, &cfg, &mut |_| {}).unwrap();

        let mut first = TrainState::initialize(&cfg, &data).unwrap();
        train_epoch(&mut first, &data, &cfg, &mut |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.spqm");
        Checkpoint { config: cfg.clone(), state: first.clone() }.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.state, first);

        let mut resumed = loaded.state;
        fit(&mut resumed, &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(resumed, straight);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut bytes: &[u8] = b"SPQX\x01\x00";
        assert!(matches!(Checkpoint::read_from(&mut bytes), Err(Error::Format(_))));
        let cfg = head_cfg();
        let state = TrainState::new(&cfg, Encoder::passthrough(16)).unwrap();
        let mut buf = Vec::new();
        Checkpoint { config: cfg, state }.write_to(&mut buf).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(&mut &cut[..]).is_err());
    }
}
