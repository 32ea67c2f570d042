//! Contrastive pre-training: one iteration builds the two views and an
//! intra-negative per sample, encodes them with the shared encoder, takes an
//! SGD step on the two-direction loss and then overwrites the bank rows.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::clip::{intra_negative, make_residual_view, make_view1, CropWindow, NegGenKind, NegGenSpec, VideoClip};
use crate::contrastive::{
    init_banks, loss_one_direction, sample_negatives, total_loss, DirectionalDraws, MemoryBanks, Temperature, TotalLoss,
};
use crate::datasets::{load_batch, parse_key_values, BatchItem, Video};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, ParamGradient};
use crate::seed::{derive_seed, rng_for};
use crate::{IicError, Result};

/// Source of the second view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View2Source {
    Residual,
    External,
}

impl View2Source {
    pub fn name(self) -> &'static str {
        match self {
            View2Source::Residual => "residual",
            View2Source::External => "external",
        }
    }
}

/// Where the cross-view positive of each direction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveSource {
    /// The other view's bank row for the same video; only anchors receive gradient.
    Bank,
    /// The other view's fresh embedding; both views receive gradient through it.
    Fresh,
}

impl PositiveSource {
    pub fn name(self) -> &'static str {
        match self {
            PositiveSource::Bank => "bank",
            PositiveSource::Fresh => "fresh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Negatives drawn per bank and direction.
    pub k: usize,
    pub tau: f64,
    /// `None` disables intra-negatives, leaving plain two-view training.
    pub neg_gen: Option<NegGenSpec>,
    pub view2: View2Source,
    pub positive: PositiveSource,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0 overwrites bank rows; larger values blend the old row in.
    pub bank_momentum: f64,
    /// Epochs between checkpoints; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    /// Fill the banks with embeddings from the initial encoder before the
    /// first epoch instead of starting from random rows.
    pub warm_start_banks: bool,
}

impl TrainConfig {
    /// Schedule used for full-scale pre-training: lr 0.01, decayed by 0.1
    /// after epochs 45, 90, 125 and 160, batch 16.
    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            batch_size: 16,
            epochs: 240,
            base_lr: 0.01,
            lr_milestones: vec![45, 90, 125, 160],
            lr_decay: 0.1,
            k: 1024,
            tau: 0.07,
            neg_gen: Some(NegGenSpec::repeat(0)),
            view2: View2Source::Residual,
            positive: PositiveSource::Bank,
            seed: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            bank_momentum: 0.5,
            checkpoint_every: 0,
            warm_start_banks: true,
        }
    }

    /// Laptop-scale settings for the synthetic dataset.
    pub fn desk() -> Self {
        Self { epochs: 30, base_lr: 0.003, lr_milestones: vec![15, 23], k: 64, ..Self::full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IicError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        Temperature::new(self.tau).map_err(|e| IicError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.bank_momentum) {
            return bad(format!("bank_momentum must lie in [0, 1), got {}", self.bank_momentum));
        }
        if let Some(spec) = &self.neg_gen {
            if spec.kind == NegGenKind::Shuffle && spec.n_subclips < 2 {
                return bad("shuffle needs at least 2 sub-clips".into());
            }
            if spec.kind == NegGenKind::Shuffle && spec.n_subclips > self.encoder.clip_len {
                return bad(format!(
                    "{} sub-clips do not fit a {}-frame clip",
                    spec.n_subclips, self.encoder.clip_len
                ));
            }
        }
        Encoder::new(self.encoder.clone()).map_err(|e| IicError::Config(e.to_string()))?;
        Ok(())
    }

    /// Reads `key = value` lines on top of [`TrainConfig::desk`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        let mut subclips = 4;
        let mut neg = Some(NegGenKind::Repeat);
        for (key, value) in parse_key_values(text)? {
            let err = |e: &dyn std::fmt::Display| IicError::Config(format!("{key}: {e}"));
            let usize_of = |v: &str| v.parse::<usize>().map_err(|e| err(&e));
            let f64_of = |v: &str| v.parse::<f64>().map_err(|e| err(&e));
            let list_of = |v: &str| -> Result<Vec<usize>> {
                v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(usize_of).collect()
            };
            match key.as_str() {
                "batch_size" => c.batch_size = usize_of(&value)?,
                "epochs" => c.epochs = usize_of(&value)?,
                "base_lr" => c.base_lr = f64_of(&value)?,
                "lr_milestones" => c.lr_milestones = list_of(&value)?,
                "lr_decay" => c.lr_decay = f64_of(&value)?,
                "k" => c.k = usize_of(&value)?,
                "tau" => c.tau = f64_of(&value)?,
                "neg_gen" => {
                    neg = match value.as_str() {
                        "repeat" => Some(NegGenKind::Repeat),
                        "shuffle" => Some(NegGenKind::Shuffle),
                        "none" => None,
                        other => return Err(err(&format!("unknown generator {other:?}"))),
                    }
                }
                "n_subclips" => subclips = usize_of(&value)?,
                "view2" => {
                    c.view2 = match value.as_str() {
                        "residual" | "res" => View2Source::Residual,
                        "external" | "ext" => View2Source::External,
                        other => return Err(err(&format!("unknown view {other:?}"))),
                    }
                }
                "positive" => {
                    c.positive = match value.as_str() {
                        "bank" => PositiveSource::Bank,
                        "fresh" => PositiveSource::Fresh,
                        other => return Err(err(&format!("unknown positive source {other:?}"))),
                    }
                }
                "seed" => c.seed = value.parse().map_err(|e| err(&e))?,
                "momentum" => c.momentum = f64_of(&value)?,
                "weight_decay" => c.weight_decay = f64_of(&value)?,
                "bank_momentum" => c.bank_momentum = f64_of(&value)?,
                "checkpoint_every" => c.checkpoint_every = usize_of(&value)?,
                "warm_start_banks" => c.warm_start_banks = value.parse().map_err(|e| err(&e))?,
                "in_channels" => c.encoder.in_channels = usize_of(&value)?,
                "stage_channels" => c.encoder.stage_channels = list_of(&value)?,
                "kernel_t" => c.encoder.kernel_t = usize_of(&value)?,
                "kernel_s" => c.encoder.kernel_s = usize_of(&value)?,
                "embedding_dim" => c.encoder.embedding_dim = usize_of(&value)?,
                "clip_len" => c.encoder.clip_len = usize_of(&value)?,
                "height" => c.encoder.height = usize_of(&value)?,
                "width" => c.encoder.width = usize_of(&value)?,
                "standardize_input" => c.encoder.standardize_input = value.parse().map_err(|e| err(&e))?,
                other => return Err(IicError::Config(format!("unknown training key {other:?}"))),
            }
        }
        c.neg_gen = neg.map(|kind| NegGenSpec { kind, n_subclips: subclips, seed: c.seed });
        c.validate()?;
        Ok(c)
    }

    /// Every field, in a form [`TrainConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let (neg, subclips) = match &self.neg_gen {
            Some(spec) => (spec.kind.name(), spec.n_subclips),
            None => ("none", 4),
        };
        let e = &self.encoder;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("lr_milestones", list(&self.lr_milestones));
        kv("lr_decay", self.lr_decay.to_string());
        kv("k", self.k.to_string());
        kv("tau", self.tau.to_string());
        kv("neg_gen", neg.to_string());
        kv("n_subclips", subclips.to_string());
        kv("view2", self.view2.name().to_string());
        kv("positive", self.positive.name().to_string());
        kv("seed", self.seed.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("bank_momentum", self.bank_momentum.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("warm_start_banks", self.warm_start_banks.to_string());
        kv("in_channels", e.in_channels.to_string());
        kv("stage_channels", list(&e.stage_channels));
        kv("kernel_t", e.kernel_t.to_string());
        kv("kernel_s", e.kernel_s.to_string());
        kv("embedding_dim", e.embedding_dim.to_string());
        kv("clip_len", e.clip_len.to_string());
        kv("height", e.height.to_string());
        kv("width", e.width.to_string());
        kv("standardize_input", e.standardize_input.to_string());
        s
    }
}

/// Learning rate at `epoch`: the base rate times `decay` once per milestone reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.lr_milestones.iter().filter(|&&m| epoch >= m).count() as i32;
    // Dividing by 10^n keeps decimal rates exact where repeated multiplication by 0.1 drifts.
    config.base_lr / config.lr_decay.recip().powi(passed)
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &ParamGradient,
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if grads.0.len() != n || velocity.len() != n {
        return Err(IicError::Shape(format!(
            "params {n}, grads {}, velocity {}",
            grads.0.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.values_mut().iter_mut().zip(&grads.0).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub banks: MemoryBanks,
    pub velocity: Vec<f64>,
    pub epoch: usize,
    pub iteration: usize,
    pub loss_history: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh parameters and banks for a dataset of `n` videos.
    pub fn new(encoder: &Encoder, n: usize, seed: u64) -> Self {
        let params = encoder.init_params(derive_seed(seed, &[1]));
        Self {
            velocity: vec![0.0; params.len()],
            params,
            banks: init_banks(n, encoder.config().embedding_dim, derive_seed(seed, &[2])),
            epoch: 0,
            iteration: 0,
            loss_history: Vec::new(),
        }
    }

    /// Mean loss of each completed epoch, in order.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.loss_history {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss;
            out[r.epoch].1 += 1;
        }
        out.into_iter().filter(|&(_, n)| n > 0).map(|(s, n)| s / n as f64).collect()
    }

    /// `epoch,iteration,loss` with a header line.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,iteration,loss\n");
        for r in &self.loss_history {
            writeln!(s, "{},{},{}", r.epoch, r.iteration, r.loss).expect("write to String");
        }
        s
    }
}

/// One SGD iteration over `batch`; returns the batch-mean loss.
pub fn train_iteration(
    encoder: &Encoder,
    state: &mut TrainState,
    batch: &[BatchItem],
    config: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(IicError::InvalidArgument("empty batch".into()));
    }
    let n = state.banks.len();
    if let Some(bad) = batch.iter().find(|b| b.index >= n) {
        return Err(IicError::IndexOutOfRange { index: bad.index, len: n });
    }
    let tau = Temperature::new(config.tau)?;
    let mut rng = rng_for(config.seed, &[3, state.iteration as u64]);

    let mut grads = encoder.zero_grad();
    let mut loss_sum = 0.0;
    let mut fresh = Vec::with_capacity(batch.len());
    for item in batch {
        let (x1, x2) = training_views(encoder, item, config.view2, &mut rng)?;

        let (e1, c1) = encoder.forward(&state.params, &x1)?;
        let (e2, c2) = encoder.forward(&state.params, &x2)?;
        let eneg = match &config.neg_gen {
            Some(spec) => Some(encoder.embed(&state.params, &intra_negative(&x1, spec, &mut rng)?)?),
            None => None,
        };

        let mut draw = || -> Result<_> {
            let d = sample_negatives(n, config.k, item.index, &mut rng)?;
            Ok(if config.neg_gen.is_some() { d } else { d.without_intra() })
        };
        let draws = DirectionalDraws { view1_anchor: draw()?, view2_anchor: draw()? };
        let loss = match config.positive {
            PositiveSource::Fresh => total_loss(&e1, &e2, &state.banks, &draws, tau)?,
            PositiveSource::Bank => {
                let banks = &state.banks;
                let p2 = banks.view2.row(item.index)?.to_vec();
                let p1 = banks.view1.row(item.index)?.to_vec();
                let a = loss_one_direction(&e1, &p2, &banks.view2, &banks.intra_neg, &draws.view1_anchor, tau)?;
                let b = loss_one_direction(&e2, &p1, &banks.view1, &banks.intra_neg, &draws.view2_anchor, tau)?;
                TotalLoss {
                    loss: a.loss + b.loss,
                    view1_direction: a.loss,
                    view2_direction: b.loss,
                    grad_v1: a.grad_anchor,
                    grad_v2: b.grad_anchor,
                }
            }
        };
        if !loss.loss.is_finite() {
            return Err(IicError::NonFinite(format!(
                "loss {} at iteration {} (video index {})",
                loss.loss, state.iteration, item.index
            )));
        }
        loss_sum += loss.loss;
        grads.add_assign(&encoder.backward(&state.params, &c1, &loss.grad_v1)?);
        grads.add_assign(&encoder.backward(&state.params, &c2, &loss.grad_v2)?);
        fresh.push((item.index, e1, e2, eneg));
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    if grads.0.iter().any(|g| !g.is_finite()) {
        return Err(IicError::NonFinite(format!("gradient at iteration {}", state.iteration)));
    }
    sgd_step(&mut state.params, &grads, &mut state.velocity, lr, config.momentum, config.weight_decay)?;
    if !state.params.is_finite() {
        return Err(IicError::NonFinite(format!("parameters after iteration {}", state.iteration)));
    }

    let m = config.bank_momentum;
    for (i, e1, e2, eneg) in &fresh {
        state.banks.view1.update_with_momentum(*i, e1, m)?;
        state.banks.view2.update_with_momentum(*i, e2, m)?;
        if let Some(e) = eneg {
            state.banks.intra_neg.update_with_momentum(*i, e, m)?;
        }
    }
    let loss = loss_sum / b;
    state.loss_history.push(LossRecord { epoch: state.epoch, iteration: state.iteration, loss });
    state.iteration += 1;
    Ok(loss)
}

/// Overwrites every bank row with the current encoder's embedding of one
/// window of the matching video, built exactly as in a training iteration.
pub fn warm_start_banks(encoder: &Encoder, state: &mut TrainState, videos: &[Video], config: &TrainConfig) -> Result<()> {
    if videos.len() != state.banks.len() {
        return Err(IicError::Shape(format!("{} videos for banks of {} rows", videos.len(), state.banks.len())));
    }
    let cfg = encoder.config();
    let mut rng = rng_for(config.seed, &[5]);
    let indices: Vec<usize> = (0..videos.len()).collect();
    for item in load_batch(videos, &indices, cfg.clip_len, &mut rng)? {
        let (x1, x2) = training_views(encoder, &item, config.view2, &mut rng)?;
        let i = item.index;
        state.banks.view1.update(i, &encoder.embed(&state.params, &x1)?)?;
        state.banks.view2.update(i, &encoder.embed(&state.params, &x2)?)?;
        if let Some(spec) = &config.neg_gen {
            let neg = intra_negative(&x1, spec, &mut rng)?;
            state.banks.intra_neg.update(i, &encoder.embed(&state.params, &neg)?)?;
        }
    }
    Ok(())
}

/// Both views of one batch item, sharing one random crop to the encoder input size.
fn training_views<R: rand::Rng + ?Sized>(
    encoder: &Encoder,
    item: &BatchItem,
    view2: View2Source,
    rng: &mut R,
) -> Result<(VideoClip, VideoClip)> {
    let cfg = encoder.config();
    let v1_full = make_view1(&item.window)?;
    let v2_full = match view2 {
        View2Source::Residual => make_residual_view(&item.window)?,
        View2Source::External => {
            let ext = item.external.as_ref().ok_or_else(|| {
                IicError::Data(format!("video {} has no external second view", item.window.source_video_id))
            })?;
            make_view1(ext)?
        }
    };
    let (_, h, w, _) = v1_full.dim();
    let crop = CropWindow::random(h, w, cfg.height, cfg.width, rng)?;
    Ok((crop.apply(&v1_full)?, crop.apply(&v2_full)?))
}

/// Runs `config.epochs` epochs from a fresh state. `checkpoint` is called with
/// the state after every `checkpoint_every`-th epoch and after the last one.
pub fn run_training<F>(
    encoder: &Encoder,
    videos: &[Video],
    config: &TrainConfig,
    mut checkpoint: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    if videos.is_empty() {
        return Err(IicError::Data("training set is empty".into()));
    }
    config.validate()?;
    if encoder.config() != &config.encoder {
        return Err(IicError::Config("encoder does not match the training config".into()));
    }
    let n = videos.len();
    if config.k >= n {
        return Err(IicError::Config(format!("k = {} needs more than {} videos", config.k, n)));
    }
    if config.view2 == View2Source::External {
        if let Some(v) = videos.iter().find(|v| v.external_view.is_none()) {
            return Err(IicError::Data(format!("video {} has no external second view", v.video_id)));
        }
    }
    let mut state = TrainState::new(encoder, n, config.seed);
    if config.warm_start_banks {
        warm_start_banks(encoder, &mut state, videos, config)?;
    }
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, config);
        let mut rng = rng_for(config.seed, &[4, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = load_batch(videos, chunk, config.encoder.clip_len, &mut rng)?;
            train_iteration(encoder, &mut state, &batch, config, lr)?;
        }
        let last = epoch + 1 == config.epochs;
        if last || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
            checkpoint(&state)?;
        }
    }
    if config.epochs == 0 {
        checkpoint(&state)?;
    }
    Ok(state)
}
