//! Synthetic reversal-pair motion videos and manifest-backed datasets.
//!
//! Classes come in pairs `(2p, 2p+1)`. Each video of class `2p` renders a
//! motion program from a start state to an end state; class `2p+1` renders the
//! same kind of program from end to start. The two classes therefore visit the
//! same set of frames and differ only in temporal order.
//!
//! Frame states are interpolated with integer-derived weights
//! `((F-1-t)/(F-1), t/(F-1))`, so a time-reversed video is bit-for-bit the
//! rendering of the mirrored program.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::clip::RawWindow;
use crate::formats::{load_clip, save_clip, ClipFile};
use crate::seed::rng_for;
use crate::{IicError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Disc,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Bar];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disc => "disc",
            ShapeKind::Bar => "bar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// The motion family of a reversal pair. The even class plays the program
/// forwards, the odd class backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionFamily {
    /// Even class moves up, odd class moves down.
    Vertical,
    /// Even class moves left, odd class moves right.
    Horizontal,
    /// Even class grows, odd class shrinks.
    Scale,
    /// Even class orbits counter-clockwise, odd class clockwise.
    Orbit,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] =
        [MotionFamily::Vertical, MotionFamily::Horizontal, MotionFamily::Scale, MotionFamily::Orbit];

    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            MotionFamily::Vertical => ["up", "down"],
            MotionFamily::Horizontal => ["left", "right"],
            MotionFamily::Scale => ["grow", "shrink"],
            MotionFamily::Orbit => ["counter-clockwise", "clockwise"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Even, at most `2 * MotionFamily::ALL.len()`.
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeKind>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            videos_per_class: 25,
            frames_per_video: 12,
            height: 32,
            width: 32,
            shapes: ShapeKind::ALL.to_vec(),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IicError::InvalidArgument(m));
        if self.num_classes < 2 || !self.num_classes.is_multiple_of(2) || self.num_classes > 2 * MotionFamily::ALL.len() {
            return bad(format!("num_classes must be even and in 2..=8, got {}", self.num_classes));
        }
        if self.videos_per_class == 0 {
            return bad("videos_per_class must be positive".into());
        }
        if self.frames_per_video < 2 {
            return bad("frames_per_video must be at least 2".into());
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("frames must be at least 16x16, got {}x{}", self.height, self.width));
        }
        if self.shapes.is_empty() {
            return bad("shape palette is empty".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn family(&self, class: u32) -> MotionFamily {
        MotionFamily::ALL[class as usize / 2]
    }

    pub fn class_name(&self, class: u32) -> &'static str {
        self.family(class).class_names()[class as usize % 2]
    }

    /// Videos per class that go to the training split (80%, at least one).
    pub fn train_per_class(&self) -> usize {
        ((self.videos_per_class * 4) / 5).max(1).min(self.videos_per_class)
    }

    /// Parses the flat `key = value` format written by [`SyntheticSpec::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in parse_key_values(text)? {
            let num = |v: &str| v.parse::<usize>().map_err(|e| IicError::Config(format!("{key}: {e}")));
            match key.as_str() {
                "num_classes" => spec.num_classes = num(&value)?,
                "videos_per_class" => spec.videos_per_class = num(&value)?,
                "frames_per_video" => spec.frames_per_video = num(&value)?,
                "height" => spec.height = num(&value)?,
                "width" => spec.width = num(&value)?,
                "noise_sigma" => {
                    spec.noise_sigma = value.parse().map_err(|e| IicError::Config(format!("{key}: {e}")))?
                }
                "seed" => spec.seed = value.parse().map_err(|e| IicError::Config(format!("{key}: {e}")))?,
                "shapes" => {
                    spec.shapes = value
                        .split(',')
                        .map(|s| {
                            ShapeKind::parse(s.trim())
                                .ok_or_else(|| IicError::Config(format!("unknown shape {s:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                other => return Err(IicError::Config(format!("unknown dataset key {other:?}"))),
            }
        }
        spec.validate().map_err(|e| IicError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let shapes: Vec<_> = self.shapes.iter().map(|s| s.name()).collect();
        format!(
            "num_classes = {}\nvideos_per_class = {}\nframes_per_video = {}\nheight = {}\nwidth = {}\n\
             shapes = {}\nnoise_sigma = {}\nseed = {}\n",
            self.num_classes,
            self.videos_per_class,
            self.frames_per_video,
            self.height,
            self.width,
            shapes.join(","),
            self.noise_sigma,
            self.seed
        )
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| IicError::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = k.trim().to_string();
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(IicError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Shape state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeState {
    pub cx: f64,
    pub cy: f64,
    /// Half extent in pixels.
    pub size: f64,
    /// Orientation in radians (only visible for bars).
    pub angle: f64,
}

impl ShapeState {
    fn blend(a: &ShapeState, wa: f64, b: &ShapeState, wb: f64) -> ShapeState {
        ShapeState {
            cx: a.cx * wa + b.cx * wb,
            cy: a.cy * wa + b.cy * wb,
            size: a.size * wa + b.size * wb,
            angle: a.angle * wa + b.angle * wb,
        }
    }
}

/// How a video's shape state evolves between its two endpoint states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Path2d {
    /// Straight-line interpolation of every state component.
    Linear,
    /// Polar interpolation around a centre: `start`/`end` hold (radius, angle)
    /// in `cx`/`cy`, the orbit centre is given separately.
    Orbit { center_x: f64, center_y: f64 },
}

/// Everything needed to render one synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionProgram {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub background: [f64; 3],
    pub start: ShapeState,
    pub end: ShapeState,
    pub path: Path2d,
}

impl MotionProgram {
    /// The same program played backwards.
    pub fn reversed(&self) -> MotionProgram {
        MotionProgram { start: self.end, end: self.start, ..self.clone() }
    }

    pub fn state_at(&self, t: usize, frames: usize) -> ShapeState {
        let span = (frames.max(2) - 1) as f64;
        let t = t.min(frames - 1);
        let w_start = (frames - 1 - t) as f64 / span;
        let w_end = t as f64 / span;
        let s = ShapeState::blend(&self.start, w_start, &self.end, w_end);
        match self.path {
            Path2d::Linear => s,
            Path2d::Orbit { center_x, center_y } => {
                // cx holds the radius, cy the polar angle.
                ShapeState {
                    cx: center_x + s.cx * s.cy.cos(),
                    cy: center_y - s.cx * s.cy.sin(),
                    size: s.size,
                    angle: s.angle,
                }
            }
        }
    }

    fn covers(&self, st: &ShapeState, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - st.cx, y - st.cy);
        match self.shape {
            ShapeKind::Square => dx.abs() <= st.size && dy.abs() <= st.size,
            ShapeKind::Disc => dx * dx + dy * dy <= st.size * st.size,
            ShapeKind::Bar => {
                let (c, s) = (st.angle.cos(), st.angle.sin());
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= st.size * 1.5 && v.abs() <= (st.size * 0.5).max(1.0)
            }
        }
    }

    /// Renders `frames` noise-free frames of `height×width×3`.
    pub fn render(&self, frames: usize, height: usize, width: usize) -> Array4<f32> {
        let mut out = Array4::zeros((frames, height, width, 3));
        for t in 0..frames {
            let st = self.state_at(t, frames);
            for h in 0..height {
                for w in 0..width {
                    let inside = self.covers(&st, w as f64 + 0.5, h as f64 + 0.5);
                    let px = if inside { &self.color } else { &self.background };
                    for c in 0..3 {
                        out[[t, h, w, c]] = px[c] as f32;
                    }
                }
            }
        }
        out
    }
}

/// Samples the forward (even-class) program of a family.
pub fn sample_program<R: Rng + ?Sized>(
    family: MotionFamily,
    shapes: &[ShapeKind],
    height: usize,
    width: usize,
    rng: &mut R,
) -> MotionProgram {
    let (hf, wf) = (height as f64, width as f64);
    let short = hf.min(wf);
    let shape = shapes[rng.random_range(0..shapes.len())];
    let color = [
        rng.random_range(0.45..1.0),
        rng.random_range(0.45..1.0),
        rng.random_range(0.45..1.0),
    ];
    let bg = rng.random_range(0.0..0.2);
    let background = [bg, bg, bg];
    let angle = rng.random_range(0.0..PI);
    let size = rng.random_range(0.09..0.14) * short;
    let margin = size * 1.6 + 1.0;

    let linear = |start: ShapeState, end: ShapeState| MotionProgram {
        shape,
        color,
        background,
        start,
        end,
        path: Path2d::Linear,
    };
    match family {
        MotionFamily::Vertical | MotionFamily::Horizontal => {
            let (along, across) = if family == MotionFamily::Vertical { (hf, wf) } else { (wf, hf) };
            let travel = rng.random_range(0.3..0.45) * along;
            let lo = margin;
            let hi = (along - margin - travel).max(lo);
            let from = rng.random_range(lo..=hi) + travel;
            let to = from - travel;
            let fixed = rng.random_range(margin..=(across - margin).max(margin));
            let (a, b) = if family == MotionFamily::Vertical {
                ((fixed, from), (fixed, to))
            } else {
                ((from, fixed), (to, fixed))
            };
            linear(
                ShapeState { cx: a.0, cy: a.1, size, angle },
                ShapeState { cx: b.0, cy: b.1, size, angle },
            )
        }
        MotionFamily::Scale => {
            let small = rng.random_range(0.05..0.08) * short;
            let large = rng.random_range(0.2..0.28) * short;
            let m = large * 1.2 + 1.0;
            let cx = rng.random_range(m..=(wf - m).max(m));
            let cy = rng.random_range(m..=(hf - m).max(m));
            linear(
                ShapeState { cx, cy, size: small, angle },
                ShapeState { cx, cy, size: large, angle },
            )
        }
        MotionFamily::Orbit => {
            let radius = rng.random_range(0.22..0.3) * short;
            let span = rng.random_range(0.6..0.9) * PI;
            let theta0 = rng.random_range(0.0..2.0 * PI);
            let m = radius + size * 1.6 + 1.0;
            let center_x = rng.random_range(m.min(wf / 2.0)..=(wf - m).max(wf / 2.0));
            let center_y = rng.random_range(m.min(hf / 2.0)..=(hf - m).max(hf / 2.0));
            MotionProgram {
                shape,
                color,
                background,
                start: ShapeState { cx: radius, cy: theta0, size, angle },
                // The bar turns with the orbit so its orientation also carries direction.
                end: ShapeState { cx: radius, cy: theta0 + span, size, angle: angle + span },
                path: Path2d::Orbit { center_x, center_y },
            }
        }
    }
}

/// Reverses the frame order of a `T×H×W×C` array.
pub fn time_reversed(frames: &Array4<f32>) -> Array4<f32> {
    frames.slice(s![..;-1, .., .., ..]).to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub video_id: u32,
    pub class_label: u32,
    pub split: Split,
    /// `F×H×W×C`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    /// Optional externally supplied second view, frame-aligned with `frames`.
    pub external_view: Option<Array4<f32>>,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// The `len`-frame window starting at `offset`, widened to f64.
    pub fn window(&self, offset: usize, len: usize) -> Result<RawWindow> {
        window_of(&self.frames, self.video_id, offset, len)
    }

    /// The external view's window at the same offset.
    pub fn external_window(&self, offset: usize, len: usize) -> Result<RawWindow> {
        let ext = self.external_view.as_ref().ok_or_else(|| {
            IicError::Data(format!("video {} has no external second view", self.video_id))
        })?;
        window_of(ext, self.video_id, offset, len)
    }
}

fn window_of(frames: &Array4<f32>, video_id: u32, offset: usize, len: usize) -> Result<RawWindow> {
    let f = frames.dim().0;
    if offset + len > f {
        return Err(IicError::Data(format!(
            "video {video_id} has {f} frames; window {offset}..{} does not fit",
            offset + len
        )));
    }
    let w = frames.slice(s![offset..offset + len, .., .., ..]).mapv(f64::from);
    RawWindow::new(w, u64::from(video_id))
}

/// Generates the videos of a spec in memory, class-major, with a stratified 80/20 split.
pub fn generate_videos(spec: &SyntheticSpec) -> Result<Vec<Video>> {
    spec.validate()?;
    let train_per_class = spec.train_per_class();
    let mut videos = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    for class in 0..spec.num_classes as u32 {
        let family = spec.family(class);
        for j in 0..spec.videos_per_class {
            let video_id = class * spec.videos_per_class as u32 + j as u32;
            let mut rng = rng_for(spec.seed, &[0xDA7A, u64::from(class), j as u64]);
            let forward = sample_program(family, &spec.shapes, spec.height, spec.width, &mut rng);
            let program = if class % 2 == 0 { forward } else { forward.reversed() };
            let mut frames = program.render(spec.frames_per_video, spec.height, spec.width);
            if spec.noise_sigma > 0.0 {
                for v in frames.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (f64::from(*v) + spec.noise_sigma * z).clamp(0.0, 1.0) as f32;
                }
            }
            let split = if j < train_per_class { Split::Train } else { Split::Test };
            videos.push(Video { video_id, class_label: class, split, frames, external_view: None });
        }
    }
    Ok(videos)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub video_id: u32,
    pub class_label: u32,
    pub split: Split,
    /// Optional IICC file holding an external second view.
    pub view2_path: Option<PathBuf>,
}

/// Tab-separated: `path  video_id  class_label  split  [view2_path]`; `#` lines are comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let err = |m: &str| IicError::Data(format!("manifest line {}: {m}", n + 1));
            if cols.len() != 4 && cols.len() != 5 {
                return Err(err("expected 4 or 5 tab-separated columns"));
            }
            records.push(ManifestRecord {
                path: PathBuf::from(cols[0]),
                video_id: cols[1].parse().map_err(|_| err("bad video_id"))?,
                class_label: cols[2].parse().map_err(|_| err("bad class_label"))?,
                split: Split::parse(cols[3]).ok_or_else(|| err("split must be train or test"))?,
                view2_path: cols.get(4).map(PathBuf::from),
            });
        }
        let manifest = Self { root: root.to_path_buf(), records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.video_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(IicError::Data(format!("duplicate video_id {}", w[0])));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| IicError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(out, "{}\t{}\t{}\t{}", r.path.display(), r.video_id, r.class_label, r.split.name());
            if let Some(v2) = &r.view2_path {
                let _ = write!(out, "\t{}", v2.display());
            }
            out.push('\n');
        }
        out
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Reads every referenced file.
    pub fn load_videos(&self) -> Result<Vec<Video>> {
        self.records
            .iter()
            .map(|r| {
                let file = load_clip(&self.root.join(&r.path))?;
                if file.video_id != r.video_id || file.class_label != r.class_label {
                    return Err(IicError::Data(format!(
                        "{}: header says video {} class {}, manifest says video {} class {}",
                        r.path.display(),
                        file.video_id,
                        file.class_label,
                        r.video_id,
                        r.class_label
                    )));
                }
                let external_view = match &r.view2_path {
                    Some(p) => {
                        let ext = load_clip(&self.root.join(p))?;
                        if ext.frames.dim() != file.frames.dim() {
                            return Err(IicError::Data(format!(
                                "{}: external view shape differs from the video",
                                p.display()
                            )));
                        }
                        Some(ext.frames)
                    }
                    None => None,
                };
                if file.frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(IicError::Data(format!("{}: values outside [0, 1]", r.path.display())));
                }
                Ok(Video {
                    video_id: r.video_id,
                    class_label: r.class_label,
                    split: r.split,
                    frames: file.frames,
                    external_view,
                })
            })
            .collect()
    }
}

/// Writes one IICC file per video plus `manifest.tsv` into an existing directory.
pub fn write_dataset(videos: &[Video], out_dir: &Path) -> Result<DatasetManifest> {
    if !out_dir.is_dir() {
        return Err(IicError::Data(format!("output directory {} does not exist", out_dir.display())));
    }
    let video_dir = out_dir.join("videos");
    fs::create_dir_all(&video_dir)?;
    let mut records = Vec::with_capacity(videos.len());
    for v in videos {
        let rel = PathBuf::from("videos").join(format!("v{:05}.iicc", v.video_id));
        save_clip(
            &out_dir.join(&rel),
            &ClipFile { frames: v.frames.clone(), class_label: v.class_label, video_id: v.video_id },
        )?;
        records.push(ManifestRecord {
            path: rel,
            video_id: v.video_id,
            class_label: v.class_label,
            split: v.split,
            view2_path: None,
        });
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records };
    fs::write(out_dir.join(MANIFEST_NAME), manifest.to_text())?;
    Ok(manifest)
}

/// Generates the synthetic dataset and writes it under `out_dir`.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let videos = generate_videos(spec)?;
    let manifest = write_dataset(&videos, out_dir)?;
    fs::write(out_dir.join("dataset_spec.txt"), spec.to_text())?;
    Ok(manifest)
}

/// Videos of one split, in manifest order.
pub fn split_of(videos: &[Video], split: Split) -> Vec<Video> {
    videos.iter().filter(|v| v.split == split).cloned().collect()
}

/// One training sample: a `(T+1)`-frame window, the matching external-view
/// window when present, and the sample's bank index.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub window: RawWindow,
    pub external: Option<RawWindow>,
    pub index: usize,
    pub offset: usize,
}

/// Cuts a `(T+1)`-frame window at a random temporal offset from each requested video.
pub fn load_batch<R: Rng + ?Sized>(
    videos: &[Video],
    indices: &[usize],
    clip_len: usize,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    indices
        .iter()
        .map(|&i| {
            let video = videos.get(i).ok_or(IicError::IndexOutOfRange { index: i, len: videos.len() })?;
            let need = clip_len + 1;
            let f = video.num_frames();
            if f < need {
                return Err(IicError::Data(format!(
                    "video {} has {f} frames, needs at least {need}",
                    video.video_id
                )));
            }
            let offset = rng.random_range(0..=f - need);
            let external = match video.external_view {
                Some(_) => Some(video.external_window(offset, need)?),
                None => None,
            };
            Ok(BatchItem { window: video.window(offset, need)?, external, index: i, offset })
        })
        .collect()
}
