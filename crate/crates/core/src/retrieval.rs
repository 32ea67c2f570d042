//! Per-video features, joint two-view features and nearest-neighbour retrieval.

use std::fmt::Write as _;

use crate::clip::{make_residual_view, make_view1, CropWindow, VideoClip};
use crate::datasets::Video;
use crate::encoder::{EmbeddingVector, Encoder, EncoderParams};
use crate::{IicError, Result};

/// The `k` values reported in every retrieval table.
pub const TABLE_KS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub video_id: u32,
    pub class_label: u32,
    pub feature: Vec<f64>,
}

/// Which input the encoder sees when extracting features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// The raw RGB clip (view 1).
    Rgb,
    /// Stacked frame differences (view 2).
    Residual,
    /// A precomputed second view attached to the dataset.
    External,
}

impl View {
    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            View::Rgb => "rgb",
            View::Residual => "res",
            View::External => "ext",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rgb" => Some(View::Rgb),
            "res" | "residual" => Some(View::Residual),
            "ext" | "external" => Some(View::External),
            _ => None,
        }
    }
}

/// Start offsets of `n` evenly spaced windows of `window` frames in a video of `frames`.
pub fn clip_offsets(frames: usize, window: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(IicError::InvalidArgument("clips_per_video must be at least 1".into()));
    }
    if frames < window {
        return Err(IicError::Data(format!("video of {frames} frames is shorter than one {window}-frame window")));
    }
    let slack = frames - window;
    if n == 1 {
        return Ok(vec![slack / 2]);
    }
    Ok((0..n).map(|j| (j * slack + (n - 1) / 2) / (n - 1)).collect())
}

/// Builds the view-`view` clip of `video` at `offset`, centre-cropped to the encoder input.
pub fn view_clip(encoder: &Encoder, video: &Video, view: View, offset: usize) -> Result<VideoClip> {
    let cfg = encoder.config();
    let len = cfg.clip_len + 1;
    let clip = match view {
        View::Rgb => make_view1(&video.window(offset, len)?)?,
        View::Residual => make_residual_view(&video.window(offset, len)?)?,
        View::External => make_view1(&video.external_window(offset, len)?)?,
    };
    let (_, h, w, _) = clip.dim();
    CropWindow::center(h, w, cfg.height, cfg.width)?.apply(&clip)
}

/// Mean of unit vectors, re-normalised.
pub fn mean_embedding(embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let d = embeddings.first().ok_or_else(|| IicError::InvalidArgument("no embeddings to average".into()))?.dim();
    let mut acc = vec![0.0; d];
    for e in embeddings {
        if e.dim() != d {
            return Err(IicError::Shape("embeddings differ in dimension".into()));
        }
        acc.iter_mut().zip(e.iter()).for_each(|(a, v)| *a += v);
    }
    let n = embeddings.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    EmbeddingVector::normalize(acc)
}

/// One feature per video: the re-normalised mean over `clips_per_video`
/// evenly spaced clips.
pub fn extract_features(
    encoder: &Encoder,
    params: &EncoderParams,
    videos: &[Video],
    view: View,
    clips_per_video: usize,
) -> Result<Vec<FeatureRecord>> {
    let window = encoder.config().clip_len + 1;
    videos
        .iter()
        .map(|video| {
            let embeddings = clip_offsets(video.num_frames(), window, clips_per_video)
                .map_err(|e| match e {
                    IicError::Data(m) => IicError::Data(format!("video {}: {m}", video.video_id)),
                    other => other,
                })?
                .into_iter()
                .map(|off| encoder.embed(params, &view_clip(encoder, video, view, off)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureRecord {
                video_id: video.video_id,
                class_label: video.class_label,
                feature: mean_embedding(&embeddings)?.into_vec(),
            })
        })
        .collect()
}

/// Concatenates two single-view features of the same video.
pub fn joint_feature(f1: &FeatureRecord, f2: &FeatureRecord) -> Result<FeatureRecord> {
    if f1.video_id != f2.video_id {
        return Err(IicError::InvalidArgument(format!(
            "joint feature needs one video, got {} and {}",
            f1.video_id, f2.video_id
        )));
    }
    let mut feature = f1.feature.clone();
    feature.extend_from_slice(&f2.feature);
    Ok(FeatureRecord { video_id: f1.video_id, class_label: f1.class_label, feature })
}

/// Pairs records of two views by position; both lists must cover the same videos in order.
pub fn joint_features(a: &[FeatureRecord], b: &[FeatureRecord]) -> Result<Vec<FeatureRecord>> {
    if a.len() != b.len() {
        return Err(IicError::Shape(format!("{} vs {} feature records", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(x, y)| joint_feature(x, y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    /// Larger is closer.
    fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let denom = (na * nb).sqrt();
                if denom > 0.0 {
                    dot / denom
                } else {
                    0.0
                }
            }
            Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub query_ids: Vec<u32>,
    /// Gallery video ids per query, nearest first, covering the whole gallery.
    pub ranked: Vec<Vec<u32>>,
    pub ks: Vec<usize>,
    /// Fraction of queries with a same-class item among their `ks[j]` nearest.
    pub accuracies: Vec<f64>,
}

impl RetrievalReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.accuracies[j])
    }
}

/// Exhaustive k-nearest-neighbour retrieval of every query against the gallery.
/// Ties are broken by the lower gallery video id.
pub fn knn_retrieve(
    queries: &[FeatureRecord],
    gallery: &[FeatureRecord],
    ks: &[usize],
    metric: Metric,
) -> Result<RetrievalReport> {
    if gallery.is_empty() {
        return Err(IicError::InvalidArgument("gallery is empty".into()));
    }
    if queries.is_empty() {
        return Err(IicError::InvalidArgument("no queries".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(IicError::InvalidArgument("k list must be nonempty positive values".into()));
    }
    let dim = gallery[0].feature.len();
    if let Some(bad) = queries.iter().chain(gallery).find(|r| r.feature.len() != dim) {
        return Err(IicError::Shape(format!(
            "video {} has feature dim {}, expected {dim}",
            bad.video_id,
            bad.feature.len()
        )));
    }

    let mut hits = vec![0usize; ks.len()];
    let mut ranked = Vec::with_capacity(queries.len());
    for q in queries {
        let mut scored: Vec<(f64, u32, u32)> = gallery
            .iter()
            .map(|g| (metric.score(&q.feature, &g.feature), g.video_id, g.class_label))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let first_hit = scored.iter().position(|s| s.2 == q.class_label);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
        ranked.push(scored.into_iter().map(|s| s.1).collect());
    }
    let n = queries.len() as f64;
    Ok(RetrievalReport {
        query_ids: queries.iter().map(|q| q.video_id).collect(),
        ranked,
        ks: ks.to_vec(),
        accuracies: hits.into_iter().map(|h| h as f64 / n).collect(),
    })
}

pub const REPORT_HEADER: &str = "label,top1,top5,top10,top20,top50";

/// CSV table with one row per labelled report; accuracies as percentages with one decimal.
pub fn report_table(rows: &[(&str, &RetrievalReport)]) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for (label, report) in rows {
        out.push_str(&report_row(label, report)?);
        out.push('\n');
    }
    Ok(out)
}

/// One CSV row (no trailing newline).
pub fn report_row(label: &str, report: &RetrievalReport) -> Result<String> {
    if label.contains(',') || label.contains('\n') {
        return Err(IicError::InvalidArgument(format!("label {label:?} cannot contain commas")));
    }
    let mut row = label.to_string();
    for k in TABLE_KS {
        let acc = report
            .accuracy_at(k)
            .ok_or_else(|| IicError::InvalidArgument(format!("report has no top-{k} accuracy")))?;
        let _ = write!(row, ",{:.1}", acc * 100.0);
    }
    Ok(row)
}
