//! Truncated-BPTT training: configuration, Adam, the learning-rate schedule,
//! the epoch loop, checkpoints and the training log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::degradation::{add_noise, DegradationModel, UpsampleMode};
use crate::erd::{ErdConfig, ErdWeights};
use crate::error::{Error, Result};
use crate::imaging::{augment, extract_luma, load_png, mixup, sample_patch_pair_sized, table_patch_sizes, ColorSpace, Image, IntensityRange, PatchPair};
use crate::nn::{l1_loss, l1_loss_backward};
use crate::scalar::Scalar;
use crate::solver::{
    estimate_sigmas, init_extrapolation_weights, initialize, run_window_taped, window_backward, SolverConfig,
    SolverState, SolverWeights, EXTRAPOLATION,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scale: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `0` means one pass worth of batches
    /// (`ceil(images / batch_size)`).
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// Last epoch trained at the initial rate.
    pub lr_decay_start: usize,
    pub lr_halving_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tbptt_k: usize,
    /// Unrolled solver steps `K`.
    pub steps: usize,
    pub fb_steps: usize,
    pub seed: u64,
    /// LR patch side; the HR patch is `scale` times larger.
    pub lr_patch: usize,
    pub mixup_prob: f64,
    /// Both shape parameters of the symmetric Beta law for the MixUp weight.
    pub mixup_beta: f64,
    /// Gaussian noise added to the LR patches (byte units).
    pub noise_sigma: f64,
    pub channels: usize,
    pub features: usize,
    pub resblocks: usize,
}

/// Keys accepted by [`TrainConfig::set`], in canonical order.
pub const TRAIN_KEYS: &[&str] = &[
    "scale",
    "batch_size",
    "epochs",
    "batches_per_epoch",
    "lr",
    "lr_decay_start",
    "lr_halving_every",
    "beta1",
    "beta2",
    "eps",
    "tbptt_k",
    "K",
    "fb_steps",
    "seed",
    "lr_patch",
    "mixup_prob",
    "mixup_beta",
    "noise_sigma",
    "channels",
    "features",
    "resblocks",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl TrainConfig {
    /// Paper defaults for a scale factor: batch 4, Adam(0.9, 0.999, 1e-8),
    /// lr 1e-3 halved every 50 epochs after epoch 100, `(K, fb_steps)` from
    /// [`SolverConfig::for_scale`], and the standard patch size.
    pub fn for_scale(scale: usize) -> Self {
        let solver = SolverConfig::for_scale(scale);
        Self {
            scale,
            batch_size: 4,
            epochs: 300,
            batches_per_epoch: 0,
            lr: 1e-3,
            lr_decay_start: 100,
            lr_halving_every: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tbptt_k: 5.min(solver.steps),
            steps: solver.steps,
            fb_steps: solver.fb_steps,
            seed: 0,
            lr_patch: table_patch_sizes(scale).map_or(48, |(lr, _)| lr),
            mixup_prob: 0.5,
            mixup_beta: 1.2,
            noise_sigma: 0.0,
            channels: 3,
            features: 64,
            resblocks: 5,
        }
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scale" => self.scale = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batches_per_epoch" => self.batches_per_epoch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_start" => self.lr_decay_start = parse(key, value)?,
            "lr_halving_every" => self.lr_halving_every = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "tbptt_k" => self.tbptt_k = parse(key, value)?,
            "K" => self.steps = parse(key, value)?,
            "fb_steps" => self.fb_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr_patch" => self.lr_patch = parse(key, value)?,
            "mixup_prob" => self.mixup_prob = parse(key, value)?,
            "mixup_beta" => self.mixup_beta = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "features" => self.features = parse(key, value)?,
            "resblocks" => self.resblocks = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scale" => self.scale.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "batches_per_epoch" => self.batches_per_epoch.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay_start" => self.lr_decay_start.to_string(),
            "lr_halving_every" => self.lr_halving_every.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "tbptt_k" => self.tbptt_k.to_string(),
            "K" => self.steps.to_string(),
            "fb_steps" => self.fb_steps.to_string(),
            "seed" => self.seed.to_string(),
            "lr_patch" => self.lr_patch.to_string(),
            "mixup_prob" => self.mixup_prob.to_string(),
            "mixup_beta" => self.mixup_beta.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "channels" => self.channels.to_string(),
            "features" => self.features.to_string(),
            "resblocks" => self.resblocks.to_string(),
            _ => return None,
        })
    }

    /// Builds a config from `(key, value)` pairs: `scale` picks the defaults,
    /// every other pair overrides them in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<Self> {
        let mut scale = 2;
        for (k, v) in pairs.clone() {
            if k == "scale" {
                scale = parse(k, v)?;
            }
        }
        let mut cfg = Self::for_scale(scale);
        let mut explicit_tbptt = false;
        for (k, v) in pairs {
            cfg.set(k, v)?;
            explicit_tbptt |= k == "tbptt_k";
        }
        if !explicit_tbptt {
            // The default window follows K when only K is given.
            cfg.tbptt_k = 5.min(cfg.steps);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key=value` lines in canonical key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in TRAIN_KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_kv_lines(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scale < 1 {
            return fail("scale must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if self.steps < 1 {
            return fail("K must be at least 1".into());
        }
        if self.tbptt_k < 1 || self.tbptt_k > self.steps {
            return fail(format!("tbptt_k = {} must lie in 1..=K (K = {})", self.tbptt_k, self.steps));
        }
        if self.fb_steps < 1 {
            return fail("fb_steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr = {} must be positive", self.lr));
        }
        if self.lr_halving_every < 1 {
            return fail("lr_halving_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) {
            return fail("mixup_prob must lie in [0, 1]".into());
        }
        if !(self.mixup_beta > 0.0) {
            return fail("mixup_beta must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        if self.lr_patch < 1 || self.channels < 1 || self.features < 1 {
            return fail("lr_patch, channels and features must be positive".into());
        }
        Ok(())
    }

    pub fn erd_config(&self) -> ErdConfig {
        ErdConfig {
            channels: self.channels,
            features: self.features,
            resblocks: self.resblocks,
            feedback: self.fb_steps > 1,
            ..ErdConfig::default()
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig { steps: self.steps, fb_steps: self.fb_steps, scale: self.scale, up_mode: UpsampleMode::Bilinear }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr, self.lr_decay_start, self.lr_halving_every, epoch)
    }
}

/// Splits `key=value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `base` for epochs `<= decay_start`, then halved every `every` epochs:
/// `base * 0.5^(floor((epoch - decay_start - 1) / every) + 1)`.
pub fn lr_schedule(base: f64, decay_start: usize, every: usize, epoch: usize) -> f64 {
    if epoch <= decay_start {
        return base;
    }
    let halvings = (epoch - decay_start - 1) / every.max(1) + 1;
    base * 0.5f64.powi(halvings as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, keyed by parameter name, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments<T> {
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

/// One Adam update (no weight decay) on every parameter yielded by `params`.
/// Every parameter must carry a gradient buffer.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    moments: &mut AdamMoments<T>,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    for (name, p) in &params {
        if !p.has_grad() {
            return Err(Error::MissingGradient(name.to_string()));
        }
    }
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (ob1, ob2) = (T::lit(1.0 - config.beta1), T::lit(1.0 - config.beta2));
    let (ic1, ic2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
    let (lr, eps) = (T::lit(lr), T::lit(config.eps));
    for (name, p) in params.iter_mut() {
        let len = p.len();
        let m = moments.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); len]);
        let v = moments.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); len]);
        let g = p.grad().expect("checked above").to_vec();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + ob1 * g[i];
            v[i] = b2 * v[i] + ob2 * g[i] * g[i];
            let mhat = m[i] * ic1;
            let vhat = v[i] * ic2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// HR training images, all in byte range with the configured channel count.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub names: Vec<String>,
    pub images: Vec<Image<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Converts each image to `channels` channels (grey replicated to RGB,
    /// RGB reduced to luma).
    pub fn new(names: Vec<String>, images: Vec<Image<T>>, channels: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidParameter("dataset is empty".into()));
        }
        let images = images
            .into_iter()
            .map(|img| conform(&img.to_range(IntensityRange::Byte), channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { names, images })
    }

    /// Loads every `.png` in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path, channels: usize) -> Result<Self> {
        let paths = list_pngs(dir)?;
        let mut names = Vec::new();
        let mut images = Vec::new();
        for p in paths {
            images.push(load_png(&p)?);
            names.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        }
        Self::new(names, images, channels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `.png` files directly inside `dir`, sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Matches an image to the network's channel count.
pub fn conform<T: Scalar>(img: &Image<T>, channels: usize) -> Result<Image<T>> {
    match (img.colorspace, channels) {
        (ColorSpace::Rgb, 3) | (ColorSpace::Luma, 1) => Ok(img.clone()),
        (ColorSpace::Rgb | ColorSpace::YCbCr, 1) => extract_luma(img),
        (ColorSpace::Luma, 3) => {
            let [_, _, h, w] = img.pixels.shape();
            let px = Tensor::from_fn([1, 3, h, w], |[_, _, y, x]| img.pixels.at([0, 0, y, x]));
            Image::new(px, img.range, ColorSpace::Rgb)
        }
        (cs, c) => Err(Error::Shape(format!("cannot feed a {cs:?} image to a {c}-channel network"))),
    }
}

/// Everything a training run owns.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub erd: ErdWeights<T>,
    pub solver: SolverWeights<T>,
    pub adam: AdamMoments<T>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh weights drawn from the seeded generator.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let erd = ErdWeights::init(config.erd_config(), &mut rng);
        let solver = init_extrapolation_weights(config.steps)?;
        Ok(Self { config, erd, solver, adam: AdamMoments::default(), epoch: 0, step: 0, rng })
    }

    pub fn param_count(&self) -> usize {
        self.erd.param_count() + self.solver.steps()
    }

    /// All trainable tensors, ERD parameters first (lexicographic), then the
    /// extrapolation weights.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.erd.params.iter_mut().chain(std::iter::once((EXTRAPOLATION, &mut self.solver.w)))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.erd.params.iter().chain(std::iter::once((EXTRAPOLATION, &self.solver.w)))
    }

    /// One Adam step over every trainable tensor.
    pub fn adam_update(&mut self, adam: &AdamConfig, lr: f64) -> Result<()> {
        let params = self.erd.params.iter_mut().chain(std::iter::once((EXTRAPOLATION, &mut self.solver.w)));
        adam_step(params, &mut self.adam, adam, lr)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Euclidean norm of all parameters.
    pub fn param_norm(&self) -> f64 {
        self.params().map(|(_, p)| p.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn degradation(&self) -> Result<DegradationModel> {
        DegradationModel::new(self.config.scale)
    }
}

/// Loss and parameter gradients of one truncation window: runs `count` steps
/// from `state`, computes the l1 loss against `hr` and backpropagates into
/// the gradient buffers. Returns the advanced state and the loss.
#[allow(clippy::too_many_arguments)]
pub fn window_gradients<T: Scalar>(
    erd: &mut ErdWeights<T>,
    solver: &mut SolverWeights<T>,
    state: &SolverState<T>,
    y: &Tensor<T>,
    hr: &Tensor<T>,
    model: &DegradationModel,
    sigma: &[T],
    fb_steps: usize,
    count: usize,
) -> Result<(SolverState<T>, f64)> {
    let (next, tape) = run_window_taped(state, y, model, erd, solver, sigma, fb_steps, count)?;
    let loss = l1_loss(&next.x_curr, hr)?;
    let g = l1_loss_backward(&next.x_curr, hr)?;
    window_backward(&tape, model, erd, solver, &g)?;
    Ok((next, loss.as_f64()))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_time: f64,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step, "epoch": self.epoch, "lr": self.lr,
            "loss": self.loss, "wall_time": self.wall_time,
        })
        .to_string()
    }
}

/// Draws one training batch: random images, aligned patches, one random
/// dihedral transform each, MixUp with probability `mixup_prob` (each item
/// mixed with its successor), optional LR noise. Returns the batch and the
/// dataset indices it was drawn from.
pub fn sample_batch<T: Scalar>(
    dataset: &Dataset<T>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PatchPair<T>, Vec<usize>)> {
    let model = DegradationModel::new(config.scale)?;
    let mut idx = Vec::with_capacity(config.batch_size);
    let mut pairs = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let i = rng.random_range(0..dataset.len());
        let p = sample_patch_pair_sized(&dataset.images[i], config.lr_patch, &model, rng)?;
        pairs.push(augment(&p, rng));
        idx.push(i);
    }
    let beta = Beta::new(config.mixup_beta, config.mixup_beta)
        .map_err(|e| Error::Config(format!("mixup_beta: {e}")))?;
    let originals = pairs.clone();
    for (j, pair) in pairs.iter_mut().enumerate() {
        if config.batch_size > 1 && rng.random::<f64>() < config.mixup_prob {
            let lambda = beta.sample(rng);
            *pair = mixup(&originals[j], &originals[(j + 1) % originals.len()], lambda)?;
        }
    }
    let mut lr = Tensor::stack(&pairs.iter().map(|p| p.lr.clone()).collect::<Vec<_>>())?;
    let hr = Tensor::stack(&pairs.iter().map(|p| p.hr.clone()).collect::<Vec<_>>())?;
    if config.noise_sigma > 0.0 {
        lr = add_noise(&lr, config.noise_sigma, rng)?;
    }
    Ok((PatchPair::new(lr, hr, config.scale)?, idx))
}

/// Runs one batch through all `K` steps, applying one Adam update per
/// truncation window. Returns the window losses.
pub fn train_batch<T: Scalar>(state: &mut TrainState<T>, batch: &PatchPair<T>, indices: &[usize]) -> Result<Vec<f64>> {
    let cfg = state.config.clone();
    let model = state.degradation()?;
    let sigma = estimate_sigmas(&batch.lr)?;
    let lr = cfg.lr_at(state.epoch as usize + 1);
    let adam = cfg.adam();
    let mut s = initialize(&batch.lr, &model)?;
    let mut losses = Vec::new();
    while s.k < cfg.steps {
        let count = cfg.tbptt_k.min(cfg.steps - s.k);
        state.zero_grad();
        let (next, loss) =
            window_gradients(&mut state.erd, &mut state.solver, &s, &batch.lr, &batch.hr, &model, &sigma, cfg.fb_steps, count)?;
        let grads_finite = state.params().all(|(_, p)| p.grad().is_some_and(|g| g.iter().all(|v| v.is_finite())));
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} (epoch {}), batch indices {indices:?}, parameter norm {:.6e}",
                state.step + 1,
                state.epoch + 1,
                state.param_norm()
            )));
        }
        state.adam_update(&adam, lr)?;
        state.step += 1;
        losses.push(loss);
        s = next.detach();
    }
    Ok(losses)
}

/// Summary of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochSummary {
    pub records: Vec<LogRecord>,
}

impl EpochSummary {
    pub fn mean_loss(&self) -> f64 {
        self.records.iter().map(|r| r.loss).sum::<f64>() / self.records.len().max(1) as f64
    }
}

/// Trains one epoch, optionally streaming log lines to `log`.
pub fn train_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    dataset: &Dataset<T>,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<EpochSummary> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("dataset is empty".into()));
    }
    state.config.validate()?;
    let cfg = state.config.clone();
    let batches = if cfg.batches_per_epoch > 0 {
        cfg.batches_per_epoch
    } else {
        dataset.len().div_ceil(cfg.batch_size)
    };
    let start = Instant::now();
    let lr = cfg.lr_at(state.epoch as usize + 1);
    let mut summary = EpochSummary::default();
    for _ in 0..batches {
        let (batch, idx) = sample_batch(dataset, &cfg, &mut state.rng)?;
        let losses = train_batch(state, &batch, &idx)?;
        let first = state.step + 1 - losses.len() as u64;
        let wall_time = start.elapsed().as_secs_f64();
        for (i, loss) in losses.into_iter().enumerate() {
            let rec = LogRecord { step: first + i as u64, epoch: state.epoch + 1, lr, loss, wall_time };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.to_json()).map_err(|e| Error::io(Path::new("<training log>"), e))?;
            }
            summary.records.push(rec);
        }
    }
    state.epoch += 1;
    Ok(summary)
}

// ---------------------------------------------------------------- checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISRR";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_table<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a str, [usize; 4], &'a [f32])>) {
    put_u32(out, entries.len() as u32);
    for (name, shape, data) in entries {
        put_bytes(out, name.as_bytes());
        for d in shape {
            put_u32(out, d as u32);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a training state (see the module docs for the layout).
pub fn encode_checkpoint(state: &TrainState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, state.param_count() as u64);
    put_bytes(&mut out, state.config.to_text().as_bytes());
    put_u64(&mut out, state.epoch);
    put_u64(&mut out, state.step);
    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put_table(&mut out, state.params().map(|(n, t)| (n, t.shape(), t.data())).collect::<Vec<_>>().into_iter());
    put_u64(&mut out, state.adam.t);
    let shape_of = |name: &str| -> [usize; 4] {
        state.params().find(|(n, _)| *n == name).map_or([1, 1, 1, 0], |(_, t)| t.shape())
    };
    for table in [&state.adam.m, &state.adam.v] {
        put_table(&mut out, table.iter().map(|(n, d)| (n.as_str(), shape_of(n), d.as_slice())).collect::<Vec<_>>().into_iter());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 in checkpoint"))
    }
    #[allow(clippy::type_complexity)]
    fn table(&mut self) -> Result<Vec<(String, [usize; 4], Vec<f32>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string()?;
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = self.u32()? as usize;
            }
            let len: usize = shape.iter().product();
            let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push((name, shape, data));
        }
        Ok(out)
    }
}

/// Parses a checkpoint produced by [`encode_checkpoint`]. `path` is used in errors only.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState<f32>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic bytes, not a checkpoint"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let declared = r.u64()?;
    let config = TrainConfig::from_text(&r.string()?)?;
    let epoch = r.u64()?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let params = r.table()?;
    let t = r.u64()?;
    let m = r.table()?;
    let v = r.table()?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let mut erd = ErdWeights::<f32>::zeros(config.erd_config());
    let mut solver = init_extrapolation_weights::<f32>(config.steps)?;
    let mut seen = 0;
    for (name, shape, data) in params {
        let target = if name == EXTRAPOLATION {
            &mut solver.w
        } else {
            erd.params
                .get_mut(&name)
                .ok_or_else(|| Error::format(path, format!("unexpected parameter {name}")))?
        };
        if target.shape() != shape {
            return Err(Error::format(
                path,
                format!("parameter {name} has shape {shape:?}, expected {:?}", target.shape()),
            ));
        }
        target.data_mut().copy_from_slice(&data);
        seen += 1;
    }
    if seen != erd.params.len() + 1 {
        return Err(Error::format(path, format!("checkpoint holds {seen} of {} tensors", erd.params.len() + 1)));
    }
    let mut adam = AdamMoments { t, ..Default::default() };
    for (dst, table) in [(&mut adam.m, m), (&mut adam.v, v)] {
        for (name, _, data) in table {
            dst.insert(name, data);
        }
    }
    let state = TrainState { config, erd, solver, adam, epoch, step, rng };
    if state.param_count() as u64 != declared {
        return Err(Error::format(path, format!("header declares {declared} parameters, table holds {}", state.param_count())));
    }
    Ok(state)
}

/// Writes a checkpoint atomically (temporary sibling, then rename).
pub fn save_checkpoint(state: &TrainState<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Parameter count recorded in a checkpoint header, without decoding the rest.
pub fn checkpoint_param_count(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic bytes, not a checkpoint"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    r.u64()
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
