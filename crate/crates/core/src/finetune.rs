//! Supervised fine-tuning: a linear softmax head on the embedding, trained
//! with cross-entropy either alone or together with the encoder.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::clip::{make_residual_view, make_view1, CropWindow, VideoClip};
use crate::datasets::{parse_key_values, Video};
use crate::encoder::{Encoder, EncoderParams};
use crate::retrieval::{extract_features, FeatureRecord, View};
use crate::seed::rng_for;
use crate::trainer::sgd_step;
use crate::{IicError, Result};

/// Which modality feeds the network during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    View1Rgb,
    /// The second view's modality: residual frames, or the external view when the dataset has one.
    View2Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Encoder learning rate.
    pub lr: f64,
    /// Learning rate of the freshly initialised head.
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub freeze_encoder: bool,
    pub clips_per_video: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 0.001,
            head_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            freeze_encoder: false,
            clips_per_video: 4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in parse_key_values(text)? {
            let err = |e: &dyn std::fmt::Display| IicError::Config(format!("{key}: {e}"));
            let usize_of = |v: &str| v.parse::<usize>().map_err(|e| err(&e));
            let f64_of = |v: &str| v.parse::<f64>().map_err(|e| err(&e));
            match key.as_str() {
                "epochs" => c.epochs = usize_of(&value)?,
                "batch_size" => c.batch_size = usize_of(&value)?,
                "lr" => c.lr = f64_of(&value)?,
                "head_lr" => c.head_lr = f64_of(&value)?,
                "momentum" => c.momentum = f64_of(&value)?,
                "weight_decay" => c.weight_decay = f64_of(&value)?,
                "freeze_encoder" => c.freeze_encoder = value.parse().map_err(|e| err(&e))?,
                "clips_per_video" => c.clips_per_video = usize_of(&value)?,
                "seed" => c.seed = value.parse().map_err(|e| err(&e))?,
                other => return Err(IicError::Config(format!("unknown fine-tuning key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "epochs = {}\nbatch_size = {}\nlr = {}\nhead_lr = {}\nmomentum = {}\nweight_decay = {}\n\
             freeze_encoder = {}\nclips_per_video = {}\nseed = {}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.head_lr,
            self.momentum,
            self.weight_decay,
            self.freeze_encoder,
            self.clips_per_video,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IicError::Config(m));
        if self.batch_size == 0 || self.clips_per_video == 0 {
            return bad("batch_size and clips_per_video must be positive".into());
        }
        if !(self.lr >= 0.0 && self.head_lr > 0.0 && self.lr.is_finite() && self.head_lr.is_finite()) {
            return bad(format!("learning rates must be finite with head_lr > 0, got {} and {}", self.lr, self.head_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

/// `logits = W e + b` over `num_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `num_classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self { num_classes, dim, weights: vec![0.0; num_classes * dim], bias: vec![0.0; num_classes] }
    }

    pub fn logits(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim {
            return Err(IicError::Shape(format!("head expects dim {}, got {}", self.dim, e.len())));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(e).map(|(w, x)| w * x).sum::<f64>())
            .collect())
    }

    /// Arg-max class; ties go to the lower label.
    pub fn predict(&self, e: &[f64]) -> Result<u32> {
        let logits = self.logits(e)?;
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        Ok(best as u32)
    }

    /// Cross-entropy of `label` and its gradient with respect to the head and the input.
    pub fn cross_entropy(&self, e: &[f64], label: u32) -> Result<HeadGradient> {
        let label = label as usize;
        if label >= self.num_classes {
            return Err(IicError::IndexOutOfRange { index: label, len: self.num_classes });
        }
        let logits = self.logits(e)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - logits[label];
        let mut delta: Vec<f64> = exps.iter().map(|x| x / sum).collect();
        delta[label] -= 1.0;
        let mut weights = vec![0.0; self.weights.len()];
        let mut input = vec![0.0; self.dim];
        for (c, &d) in delta.iter().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            for j in 0..self.dim {
                weights[c * self.dim + j] = d * e[j];
                input[j] += d * row[j];
            }
        }
        Ok(HeadGradient { loss, weights, bias: delta, input })
    }
}

/// Momentum SGD state for a [`LinearHead`].
struct HeadOptimizer {
    vw: Vec<f64>,
    vb: Vec<f64>,
}

impl HeadOptimizer {
    fn new(head: &LinearHead) -> Self {
        Self { vw: vec![0.0; head.weights.len()], vb: vec![0.0; head.bias.len()] }
    }

    fn step(&mut self, head: &mut LinearHead, gw: &[f64], gb: &[f64], lr: f64, momentum: f64) {
        for ((p, g), v) in head.weights.iter_mut().zip(gw).zip(&mut self.vw) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        for ((p, g), v) in head.bias.iter_mut().zip(gb).zip(&mut self.vb) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

fn check_labels<'a>(labels: impl Iterator<Item = &'a u32>) -> Result<usize> {
    let seen: BTreeSet<u32> = labels.copied().collect();
    if seen.len() < 2 {
        return Err(IicError::Data(format!("need at least 2 labels, found {}", seen.len())));
    }
    Ok(*seen.last().expect("nonempty") as usize + 1)
}

/// Trains a head on fixed features with full-batch momentum SGD.
pub fn train_linear_probe(features: &[FeatureRecord], epochs: usize, lr: f64, momentum: f64) -> Result<LinearHead> {
    let num_classes = check_labels(features.iter().map(|f| &f.class_label))?;
    let dim = features[0].feature.len();
    let mut head = LinearHead::zeros(num_classes, dim);
    let mut opt = HeadOptimizer::new(&head);
    let n = features.len() as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; head.weights.len()];
        let mut gb = vec![0.0; num_classes];
        for f in features {
            let g = head.cross_entropy(&f.feature, f.class_label)?;
            gw.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b / n);
            gb.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b / n);
        }
        opt.step(&mut head, &gw, &gb, lr, momentum);
    }
    Ok(head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Videos whose label the head has never been trained on; counted as errors.
    pub unseen: Vec<u32>,
}

pub fn evaluate_head(head: &LinearHead, features: &[FeatureRecord], known: &BTreeSet<u32>) -> Result<Evaluation> {
    if features.is_empty() {
        return Err(IicError::InvalidArgument("nothing to evaluate".into()));
    }
    let mut correct = 0;
    let mut unseen = Vec::new();
    for f in features {
        if !known.contains(&f.class_label) {
            unseen.push(f.video_id);
            continue;
        }
        if head.predict(&f.feature)? == f.class_label {
            correct += 1;
        }
    }
    Ok(Evaluation { accuracy: correct as f64 / features.len() as f64, unseen })
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub params: EncoderParams,
    pub head: LinearHead,
    pub train_accuracy: f64,
    pub test: Evaluation,
    pub loss_per_epoch: Vec<f64>,
}

fn mode_view(mode: FinetuneMode, videos: &[Video]) -> View {
    match mode {
        FinetuneMode::View1Rgb => View::Rgb,
        FinetuneMode::View2Modality if videos.iter().all(|v| v.external_view.is_some()) => View::External,
        FinetuneMode::View2Modality => View::Residual,
    }
}

fn training_clip<R: Rng + ?Sized>(encoder: &Encoder, video: &Video, view: View, rng: &mut R) -> Result<VideoClip> {
    let cfg = encoder.config();
    let len = cfg.clip_len + 1;
    let f = video.num_frames();
    if f < len {
        return Err(IicError::Data(format!("video {} has {f} frames, needs at least {len}", video.video_id)));
    }
    let offset = rng.random_range(0..=f - len);
    let clip = match view {
        View::Rgb => make_view1(&video.window(offset, len)?)?,
        View::Residual => make_residual_view(&video.window(offset, len)?)?,
        View::External => make_view1(&video.external_window(offset, len)?)?,
    };
    let (_, h, w, _) = clip.dim();
    CropWindow::random(h, w, cfg.height, cfg.width, rng)?.apply(&clip)
}

/// Fine-tunes `pretrained` with a new linear head on `train` and reports
/// accuracy on `test`. Test labels absent from `train` are reported, not fatal.
pub fn finetune_classifier(
    encoder: &Encoder,
    pretrained: &EncoderParams,
    train: &[Video],
    test: &[Video],
    mode: FinetuneMode,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    let num_classes = check_labels(train.iter().map(|v| &v.class_label))?;
    let known: BTreeSet<u32> = train.iter().map(|v| v.class_label).collect();
    let view = mode_view(mode, train);
    let mut params = pretrained.clone();
    let mut head = LinearHead::zeros(num_classes, encoder.config().embedding_dim);
    let mut head_opt = HeadOptimizer::new(&head);
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_per_epoch = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, &[0xF1, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len() as f64;
            let mut gw = vec![0.0; head.weights.len()];
            let mut gb = vec![0.0; num_classes];
            let mut grads = encoder.zero_grad();
            for &i in chunk {
                let clip = training_clip(encoder, &train[i], view, &mut rng)?;
                let label = train[i].class_label;
                if config.freeze_encoder {
                    let e = encoder.embed(&params, &clip)?;
                    let g = head.cross_entropy(&e, label)?;
                    epoch_loss += g.loss;
                    gw.iter_mut().zip(&g.weights).for_each(|(a, x)| *a += x / b);
                    gb.iter_mut().zip(&g.bias).for_each(|(a, x)| *a += x / b);
                } else {
                    let (e, cache) = encoder.forward(&params, &clip)?;
                    let g = head.cross_entropy(&e, label)?;
                    epoch_loss += g.loss;
                    gw.iter_mut().zip(&g.weights).for_each(|(a, x)| *a += x / b);
                    gb.iter_mut().zip(&g.bias).for_each(|(a, x)| *a += x / b);
                    grads.add_assign(&encoder.backward(&params, &cache, &g.input)?);
                }
            }
            if !epoch_loss.is_finite() {
                return Err(IicError::NonFinite(format!("fine-tuning loss in epoch {epoch}")));
            }
            head_opt.step(&mut head, &gw, &gb, config.head_lr, config.momentum);
            if !config.freeze_encoder {
                grads.scale(1.0 / b);
                sgd_step(&mut params, &grads, &mut velocity, config.lr, config.momentum, config.weight_decay)?;
            }
        }
        loss_per_epoch.push(epoch_loss / train.len() as f64);
    }

    let train_features = extract_features(encoder, &params, train, view, config.clips_per_video)?;
    let train_accuracy = evaluate_head(&head, &train_features, &known)?.accuracy;
    let test_features = extract_features(encoder, &params, test, view, config.clips_per_video)?;
    let test = evaluate_head(&head, &test_features, &known)?;
    Ok(FinetuneReport { params, head, train_accuracy, test, loss_per_epoch })
}
