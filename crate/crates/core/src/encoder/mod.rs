//! A small residual 3D convolutional encoder with an analytic backward pass.
//!
//! Each stage is a spatially strided convolution followed by a residual block of
//! two convolutions, mirroring the block structure of R3D at a much smaller
//! width. A global average pool and a linear projection give the feature, which
//! is L2-normalised inside the encoder so every consumer sees unit vectors.
//!
//! The nonlinearity is SiLU rather than ReLU: it is smooth, so central finite
//! differences agree with the analytic gradient without kink crossings.

mod conv;

use std::ops::{Deref, Range};

use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;

pub use conv::{ConvGeometry, Extent};

use crate::clip::VideoClip;
use crate::seed::rng_for;
use crate::{IicError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub kernel_t: usize,
    pub kernel_s: usize,
    pub embedding_dim: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    /// Rescale each input channel of a clip to zero mean and unit variance.
    pub standardize_input: bool,
}

impl EncoderConfig {
    /// 8×32×32×3 input, stages (8, 16, 32), 64-d embedding.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![8, 16, 32],
            kernel_t: 3,
            kernel_s: 3,
            embedding_dim: 64,
            clip_len: 8,
            height: 32,
            width: 32,
            standardize_input: true,
        }
    }

    /// 4×8×8×3 input, stages (3, 4), 8-d embedding; small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![3, 4],
            kernel_t: 3,
            kernel_s: 3,
            embedding_dim: 8,
            clip_len: 4,
            height: 8,
            width: 8,
            standardize_input: true,
        }
    }

    pub fn input_extent(&self) -> Extent {
        Extent { t: self.clip_len, h: self.height, w: self.width }
    }
}

/// A named run of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Number of inputs feeding one output unit; used for He initialisation.
    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

/// All encoder weights in one flat vector. Every mutable access bumps the
/// version so activation caches built before an update are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    values: Vec<f64>,
    version: u64,
}

impl EncoderParams {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values, version: 0 }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(pub Vec<f64>);

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalises `raw`; fails on zero or non-finite input.
    pub fn normalize(raw: Vec<f64>) -> Result<Self> {
        Ok(normalize_with_norm(raw)?.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn normalize_with_norm(mut raw: Vec<f64>) -> Result<(EmbeddingVector, f64)> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(IicError::NonFinite("embedding norm".into()));
    }
    if norm < 1e-12 {
        return Err(IicError::DegenerateNorm);
    }
    raw.iter_mut().for_each(|v| *v /= norm);
    Ok((EmbeddingVector(raw), norm))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone)]
struct ConvLayer {
    geometry: ConvGeometry,
    weight: Range<usize>,
    bias: Range<usize>,
}

impl ConvLayer {
    fn forward(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.geometry.output_len()];
        self.geometry.forward(
            &params[self.weight.clone()],
            &params[self.bias.clone()],
            input,
            &mut out,
        );
        out
    }

    fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        grad_output: &[f64],
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut grad_input = want_input.then(|| vec![0.0; self.geometry.input_len()]);
        let (gw, gb) = split_two(grads, self.weight.clone(), self.bias.clone());
        self.geometry.backward(
            &params[self.weight.clone()],
            input,
            grad_output,
            gw,
            gb,
            grad_input.as_deref_mut(),
        );
        grad_input
    }
}

/// Mutable borrows of two disjoint ranges, `a` before `b`.
fn split_two(buf: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (head, tail) = buf.split_at_mut(b.start);
    (&mut head[a], &mut tail[..b.end - b.start])
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvLayer,
    res1: ConvLayer,
    res2: ConvLayer,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Vec<f64>,
    down_pre: Vec<f64>,
    res1_pre: Vec<f64>,
    sum_pre: Vec<f64>,
}

/// Intermediate values saved by [`Encoder::forward`] for [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    version: u64,
    stages: Vec<StageCache>,
    pooled: Vec<f64>,
    embedding: Vec<f64>,
    norm: f64,
}

impl ActivationCache {
    /// Norm of the projection output before L2 normalisation.
    pub fn raw_norm(&self) -> f64 {
        self.norm
    }
}

/// The encoder's architecture and parameter layout. Parameters are held
/// separately in [`EncoderParams`] so one encoder serves every view.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layout: Vec<ParamSlice>,
    stages: Vec<Stage>,
    proj_weight: Range<usize>,
    proj_bias: Range<usize>,
    num_params: usize,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let bad = |msg: String| Err(IicError::InvalidArgument(msg));
        if config.embedding_dim < 2 {
            return bad(format!("embedding_dim must be >= 2, got {}", config.embedding_dim));
        }
        if config.stage_channels.is_empty() || config.stage_channels.contains(&0) {
            return bad("stage_channels must be a nonempty list of positive counts".into());
        }
        if config.in_channels == 0 || config.kernel_t == 0 || config.kernel_s == 0 {
            return bad("channel and kernel sizes must be positive".into());
        }
        if config.kernel_t.is_multiple_of(2) || config.kernel_s.is_multiple_of(2) {
            return bad("kernel sizes must be odd".into());
        }
        if config.input_extent().volume() == 0 {
            return bad("input extent must be nonzero".into());
        }

        let mut layout = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let slice = ParamSlice { name, offset, shape };
            offset += slice.len();
            let range = slice.range();
            layout.push(slice);
            range
        };

        let mut stages = Vec::new();
        let mut extent = config.input_extent();
        let mut channels = config.in_channels;
        for (s, &out) in config.stage_channels.iter().enumerate() {
            let mut conv = |name: &str, cin: usize, stride: usize, input: Extent| {
                let geometry =
                    ConvGeometry::new(cin, out, config.kernel_t, config.kernel_s, stride, input)
                        .ok_or_else(|| {
                            IicError::InvalidArgument(format!(
                                "stage {s} {name}: input {input:?} collapses to an empty volume"
                            ))
                        })?;
                let k = (config.kernel_t, config.kernel_s);
                let weight = push(format!("stage{s}.{name}.weight"), vec![out, cin, k.0, k.1, k.1]);
                let bias = push(format!("stage{s}.{name}.bias"), vec![out]);
                Ok::<_, IicError>(ConvLayer { geometry, weight, bias })
            };
            let down = conv("down", channels, 2, extent)?;
            let inner = down.geometry.output;
            let res1 = conv("res1", out, 1, inner)?;
            let res2 = conv("res2", out, 1, inner)?;
            stages.push(Stage { down, res1, res2 });
            extent = inner;
            channels = out;
        }
        let proj_weight = push("proj.weight".into(), vec![config.embedding_dim, channels]);
        let proj_bias = push("proj.bias".into(), vec![config.embedding_dim]);
        let num_params = offset;

        Ok(Self { config, layout, stages, proj_weight, proj_bias, num_params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    fn last_channels(&self) -> usize {
        *self.config.stage_channels.last().expect("validated nonempty")
    }

    /// He-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init_params(&self, seed: u64) -> EncoderParams {
        let mut rng = rng_for(seed, &[0x1A17]);
        let mut values = vec![0.0; self.num_params];
        for slice in &self.layout {
            if slice.is_bias() {
                continue;
            }
            let std = (2.0 / slice.fan_in() as f64).sqrt();
            for v in &mut values[slice.range()] {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * std;
            }
        }
        EncoderParams::from_vec(values)
    }

    pub fn zero_grad(&self) -> ParamGradient {
        ParamGradient::zeros(self.num_params)
    }

    fn check_params(&self, params: &EncoderParams) -> Result<()> {
        if params.len() != self.num_params {
            return Err(IicError::Shape(format!(
                "parameter vector has {} entries, encoder expects {}",
                params.len(),
                self.num_params
            )));
        }
        Ok(())
    }

    /// Converts `T×H×W×C` frames into the channel-first layout, checking the
    /// shape, and standardises each channel when configured.
    fn to_channel_first(&self, frames: &Array4<f64>) -> Result<Vec<f64>> {
        let (t, h, w, c) = frames.dim();
        let cfg = &self.config;
        if (t, h, w, c) != (cfg.clip_len, cfg.height, cfg.width, cfg.in_channels) {
            return Err(IicError::Shape(format!(
                "clip {t}x{h}x{w}x{c} does not match encoder input {}x{}x{}x{}",
                cfg.clip_len, cfg.height, cfg.width, cfg.in_channels
            )));
        }
        let mut x: Vec<f64> = frames.view().permuted_axes([3, 0, 1, 2]).iter().copied().collect();
        if cfg.standardize_input {
            let vol = t * h * w;
            for ch in x.chunks_exact_mut(vol) {
                let m = ch.iter().sum::<f64>() / vol as f64;
                let sd = (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vol as f64).sqrt();
                // A constant channel is only centred.
                let sd = if sd > 1e-8 { sd } else { 1.0 };
                ch.iter_mut().for_each(|v| *v = (*v - m) / sd);
            }
        }
        Ok(x)
    }

    fn run(
        &self,
        params: &EncoderParams,
        frames: &Array4<f64>,
        keep: bool,
    ) -> Result<(EmbeddingVector, Option<ActivationCache>)> {
        self.check_params(params)?;
        let p = params.values();
        let mut x = self.to_channel_first(frames)?;
        let mut caches = Vec::with_capacity(if keep { self.stages.len() } else { 0 });
        for stage in &self.stages {
            let down_pre = stage.down.forward(p, &x);
            let h: Vec<f64> = down_pre.iter().map(|&v| silu(v)).collect();
            let res1_pre = stage.res1.forward(p, &h);
            let g: Vec<f64> = res1_pre.iter().map(|&v| silu(v)).collect();
            let mut sum_pre = stage.res2.forward(p, &g);
            for (s, skip) in sum_pre.iter_mut().zip(&h) {
                *s += skip;
            }
            let out = sum_pre.iter().map(|&v| silu(v)).collect();
            if keep {
                caches.push(StageCache {
                    input: std::mem::replace(&mut x, out),
                    down_pre,
                    res1_pre,
                    sum_pre,
                });
            } else {
                x = out;
            }
        }

        let channels = self.last_channels();
        let vol = x.len() / channels;
        let pooled: Vec<f64> =
            x.chunks_exact(vol).map(|c| c.iter().sum::<f64>() / vol as f64).collect();

        let w = &p[self.proj_weight.clone()];
        let raw: Vec<f64> = p[self.proj_bias.clone()]
            .iter()
            .zip(w.chunks_exact(channels))
            .map(|(b, row)| b + row.iter().zip(&pooled).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let (embedding, norm) = normalize_with_norm(raw)?;
        let cache = keep.then(|| ActivationCache {
            version: params.version(),
            stages: caches,
            pooled,
            embedding: embedding.as_slice().to_vec(),
            norm,
        });
        Ok((embedding, cache))
    }

    /// Encodes `T×H×W×C` frames, keeping what the backward pass needs.
    pub fn forward_frames(
        &self,
        params: &EncoderParams,
        frames: &Array4<f64>,
    ) -> Result<(EmbeddingVector, ActivationCache)> {
        let (e, cache) = self.run(params, frames, true)?;
        Ok((e, cache.expect("cache requested")))
    }

    pub fn forward(
        &self,
        params: &EncoderParams,
        clip: &VideoClip,
    ) -> Result<(EmbeddingVector, ActivationCache)> {
        self.forward_frames(params, clip.frames())
    }

    /// Forward pass without a cache, for features that receive no gradient.
    pub fn embed(&self, params: &EncoderParams, clip: &VideoClip) -> Result<EmbeddingVector> {
        self.embed_frames(params, clip.frames())
    }

    pub fn embed_frames(&self, params: &EncoderParams, frames: &Array4<f64>) -> Result<EmbeddingVector> {
        Ok(self.run(params, frames, false)?.0)
    }

    /// Gradient of `grad_embedding · embedding` with respect to every parameter,
    /// including the L2 normalisation.
    pub fn backward(
        &self,
        params: &EncoderParams,
        cache: &ActivationCache,
        grad_embedding: &[f64],
    ) -> Result<ParamGradient> {
        self.check_params(params)?;
        if cache.version != params.version() {
            return Err(IicError::StaleCache { cached: cache.version, current: params.version() });
        }
        if grad_embedding.len() != self.config.embedding_dim {
            return Err(IicError::Shape(format!(
                "embedding gradient has {} entries, expected {}",
                grad_embedding.len(),
                self.config.embedding_dim
            )));
        }
        let p = params.values();
        let mut grads = self.zero_grad();
        let g = &mut grads.0;

        // Through u = z / |z|.
        let u = &cache.embedding;
        let along: f64 = grad_embedding.iter().zip(u).map(|(a, b)| a * b).sum();
        let g_raw: Vec<f64> =
            grad_embedding.iter().zip(u).map(|(gi, ui)| (gi - along * ui) / cache.norm).collect();

        let channels = self.last_channels();
        let mut g_pooled = vec![0.0; channels];
        {
            let (gw, gb) = split_two(g, self.proj_weight.clone(), self.proj_bias.clone());
            let w = &p[self.proj_weight.clone()];
            for (o, &go) in g_raw.iter().enumerate() {
                gb[o] += go;
                for c in 0..channels {
                    gw[o * channels + c] += go * cache.pooled[c];
                    g_pooled[c] += go * w[o * channels + c];
                }
            }
        }

        let last = self.stages.last().expect("validated nonempty");
        let vol = last.down.geometry.output.volume();
        let mut g_x: Vec<f64> = g_pooled
            .iter()
            .flat_map(|&gc| std::iter::repeat_n(gc / vol as f64, vol))
            .collect();

        for (idx, (stage, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let g_sum: Vec<f64> =
                g_x.iter().zip(&sc.sum_pre).map(|(gx, &s)| gx * silu_grad(s)).collect();
            let h: Vec<f64> = sc.down_pre.iter().map(|&v| silu(v)).collect();
            let act1: Vec<f64> = sc.res1_pre.iter().map(|&v| silu(v)).collect();

            let g_act1 = stage.res2.backward(p, &act1, &g_sum, g, true).expect("requested");
            let g_res1: Vec<f64> =
                g_act1.iter().zip(&sc.res1_pre).map(|(ga, &s)| ga * silu_grad(s)).collect();
            let g_h_conv = stage.res1.backward(p, &h, &g_res1, g, true).expect("requested");
            let g_down: Vec<f64> = g_h_conv
                .iter()
                .zip(&g_sum)
                .zip(&sc.down_pre)
                .map(|((gc, gs), &s)| (gc + gs) * silu_grad(s))
                .collect();
            let g_in = stage.down.backward(p, &sc.input, &g_down, g, idx > 0);
            if let Some(g_in) = g_in {
                g_x = g_in;
            }
        }
        Ok(grads)
    }

    /// Index of the parameter slice containing flat index `i`.
    pub fn slice_of(&self, i: usize) -> Option<&ParamSlice> {
        self.layout.iter().find(|s| s.range().contains(&i))
    }
}

/// Frames with the same extent as the encoder's input, for building test inputs.
pub fn zeros_like_input(config: &EncoderConfig) -> Array4<f64> {
    Array4::zeros((config.clip_len, config.height, config.width, config.in_channels))
}
