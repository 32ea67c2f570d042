//! `iic`: data generation, contrastive pre-training, feature extraction,
//! retrieval, fine-tuning and report emission for the synthetic pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iic_core::datasets::{generate_dataset, split_of, DatasetManifest, Split, SyntheticSpec, Video, MANIFEST_NAME};
use iic_core::encoder::{Encoder, EncoderParams};
use iic_core::finetune::{finetune_classifier, FinetuneConfig, FinetuneMode};
use iic_core::formats::{load_encoder, load_features, save_banks, save_encoder, save_features};
use iic_core::retrieval::{
    extract_features, joint_features, knn_retrieve, report_table, Metric, RetrievalReport, View, TABLE_KS,
};
use iic_core::trainer::{run_training, TrainConfig};
use iic_core::{ErrorKind, IicError, Result};

const ENCODER_FILE: &str = "encoder.iicwgt";
const BANKS_FILE: &str = "banks.iicbnk";
const LOSS_FILE: &str = "train_loss.csv";
const REPORT_FILE: &str = "retrieval_report.csv";
const FINETUNE_FILE: &str = "finetune_report.csv";

#[derive(Parser, Debug)]
#[command(name = "iic", version, about = "Inter-intra contrastive video representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic motion dataset.
    GenData {
        /// Dataset spec (key = value); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Existing output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest; only the train split is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train without intra-negatives.
        #[arg(long)]
        ablate_intra_neg: bool,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-video features of one view and split.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        view: ViewArg,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long, default_value_t = 4)]
        clips_per_video: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-vs-train nearest-neighbour retrieval.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated rows to report.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "rgb,res,joint")]
        views: Vec<ViewsArg>,
        #[arg(long, default_value_t = 4)]
        clips_per_video: usize,
        /// Directory for features and the report; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning with a linear head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise the artifacts in a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewArg {
    Rgb,
    Res,
    Ext,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Rgb => View::Rgb,
            ViewArg::Res => View::Residual,
            ViewArg::Ext => View::External,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ViewsArg {
    Rgb,
    Res,
    Ext,
    Joint,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    View1Rgb,
    View2,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as Clap;
            if matches!(e.kind(), Clap::DisplayHelp | Clap::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out),
        Command::Train { config, data, out, ablate_intra_neg, seed } => {
            train(config.as_deref(), &data, &out, ablate_intra_neg, seed)
        }
        Command::Extract { checkpoint, data, view, split, clips_per_video, out } => {
            extract(&checkpoint, &data, view.into(), split, clips_per_video, &out)
        }
        Command::Retrieve { checkpoint, data, views, clips_per_video, out } => {
            let out = out.unwrap_or_else(|| checkpoint_dir(&checkpoint));
            retrieve(&checkpoint, &data, &views, clips_per_video, &out)
        }
        Command::Finetune { checkpoint, data, mode, config, out } => {
            finetune(&checkpoint, &data, mode, config.as_deref(), &out)
        }
        Command::Report { run } => report(&run),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| IicError::Config(format!("{}: {e}", path.display())))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(IicError::InvalidArgument(format!("output directory {} does not exist", dir.display())))
    }
}

/// Accepts either a manifest file or the directory holding it.
fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    DatasetManifest::load(&file)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Accepts either a weights file or a run directory containing one.
fn load_checkpoint(path: &Path) -> Result<(Encoder, EncoderParams)> {
    let file = if path.is_dir() { path.join(ENCODER_FILE) } else { path.to_path_buf() };
    let (config, params) = load_encoder(&file)?;
    let encoder = Encoder::new(config)?;
    if params.len() != encoder.num_params() {
        return Err(IicError::Format(format!(
            "{}: {} parameters for an encoder of {}",
            file.display(),
            params.len(),
            encoder.num_params()
        )));
    }
    Ok((encoder, params))
}

fn gen_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(path) => SyntheticSpec::parse(&read_text(path)?)?,
        None => SyntheticSpec::default(),
    };
    require_dir(out)?;
    let manifest = generate_dataset(&spec, out)?;
    println!("{} videos written", manifest.records.len());
    println!(
        "manifest: {} (train {}, test {})",
        out.join(MANIFEST_NAME).display(),
        manifest.count(Split::Train),
        manifest.count(Split::Test)
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, ablate: bool, seed: Option<u64>) -> Result<()> {
    let mut config = match config {
        Some(path) => TrainConfig::parse(&read_text(path)?)?,
        None => TrainConfig::desk(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if ablate {
        config.neg_gen = None;
    }
    config.validate()?;
    require_dir(out)?;
    let videos = split_of(&load_manifest(data)?.load_videos()?, Split::Train);
    fs::write(out.join("train_config.txt"), config.to_text())?;
    let encoder = Encoder::new(config.encoder.clone())?;
    let state = run_training(&encoder, &videos, &config, |state| {
        save_encoder(&out.join(ENCODER_FILE), encoder.config(), &state.params)?;
        save_banks(&out.join(BANKS_FILE), &state.banks)?;
        fs::write(out.join(LOSS_FILE), state.loss_csv())?;
        Ok(())
    })?;
    let means = state.epoch_mean_losses();
    match (means.first(), means.last()) {
        (Some(first), Some(last)) => {
            println!("{} epochs, {} iterations; mean loss {first:.4} -> {last:.4}", means.len(), state.iteration)
        }
        _ => println!("0 epochs; wrote initial checkpoint"),
    }
    Ok(())
}

fn select(videos: Vec<Video>, split: SplitArg) -> Vec<Video> {
    match split {
        SplitArg::Train => split_of(&videos, Split::Train),
        SplitArg::Test => split_of(&videos, Split::Test),
        SplitArg::All => videos,
    }
}

fn extract(checkpoint: &Path, data: &Path, view: View, split: SplitArg, clips: usize, out: &Path) -> Result<()> {
    let (encoder, params) = load_checkpoint(checkpoint)?;
    let videos = select(load_manifest(data)?.load_videos()?, split);
    let features = extract_features(&encoder, &params, &videos, view, clips)?;
    save_features(out, &features)?;
    println!("{} features of dim {} written", features.len(), encoder.config().embedding_dim);
    Ok(())
}

fn retrieve(checkpoint: &Path, data: &Path, views: &[ViewsArg], clips: usize, out: &Path) -> Result<()> {
    if views.is_empty() {
        return Err(IicError::InvalidArgument("no views requested".into()));
    }
    require_dir(out)?;
    let (encoder, params) = load_checkpoint(checkpoint)?;
    let videos = load_manifest(data)?.load_videos()?;
    let train = split_of(&videos, Split::Train);
    let test = split_of(&videos, Split::Test);
    let has_external = videos.iter().all(|v| v.external_view.is_some());
    let second = if has_external { View::External } else { View::Residual };

    // Features go through the f32 files so that every row, joint included,
    // is computed from exactly what is on disk.
    let feature_files = |view: View| -> Result<(PathBuf, PathBuf)> {
        let gallery = out.join(format!("features_train_{}.iicftr", view.label()));
        let queries = out.join(format!("features_test_{}.iicftr", view.label()));
        save_features(&gallery, &extract_features(&encoder, &params, &train, view, clips)?)?;
        save_features(&queries, &extract_features(&encoder, &params, &test, view, clips)?)?;
        Ok((gallery, queries))
    };
    let mut files: Vec<(View, (PathBuf, PathBuf))> = Vec::new();
    let mut need = |view: View| -> Result<(PathBuf, PathBuf)> {
        if let Some((_, f)) = files.iter().find(|(v, _)| *v == view) {
            return Ok(f.clone());
        }
        let f = feature_files(view)?;
        files.push((view, f.clone()));
        Ok(f)
    };

    let mut rows: Vec<(String, RetrievalReport)> = Vec::new();
    for &v in views {
        let (label, gallery, queries) = match v {
            ViewsArg::Joint => {
                let (g1, q1) = need(View::Rgb)?;
                let (g2, q2) = need(second)?;
                let gallery = joint_features(&load_features(&g1)?, &load_features(&g2)?)?;
                let queries = joint_features(&load_features(&q1)?, &load_features(&q2)?)?;
                ("joint".to_string(), gallery, queries)
            }
            single => {
                let view = match single {
                    ViewsArg::Rgb => View::Rgb,
                    ViewsArg::Res => View::Residual,
                    _ => View::External,
                };
                let (g, q) = need(view)?;
                (view.label().to_string(), load_features(&g)?, load_features(&q)?)
            }
        };
        let report = knn_retrieve(&queries, &gallery, &TABLE_KS, Metric::Cosine)?;
        rows.push((label, report));
    }
    let table = report_table(&rows.iter().map(|(l, r)| (l.as_str(), r)).collect::<Vec<_>>())?;
    fs::write(out.join(REPORT_FILE), &table)?;
    fs::write(
        out.join("retrieve_config.txt"),
        format!("clips_per_video = {clips}\nmetric = cosine\nks = 1,5,10,20,50\nsecond_view = {}\n", second.label()),
    )?;
    print!("{table}");
    Ok(())
}

fn finetune(checkpoint: &Path, data: &Path, mode: ModeArg, config: Option<&Path>, out: &Path) -> Result<()> {
    let config = match config {
        Some(path) => FinetuneConfig::parse(&read_text(path)?)?,
        None => FinetuneConfig::default(),
    };
    require_dir(out)?;
    let (encoder, params) = load_checkpoint(checkpoint)?;
    let videos = load_manifest(data)?.load_videos()?;
    let (train, test) = (split_of(&videos, Split::Train), split_of(&videos, Split::Test));
    let (mode, label) = match mode {
        ModeArg::View1Rgb => (FinetuneMode::View1Rgb, "view1_rgb"),
        ModeArg::View2 => (FinetuneMode::View2Modality, "view2"),
    };
    let report = finetune_classifier(&encoder, &params, &train, &test, mode, &config)?;
    fs::write(out.join("finetune_config.txt"), config.to_text())?;
    let csv = format!(
        "mode,train_accuracy,test_accuracy,unseen\n{label},{:.1},{:.1},{}\n",
        100.0 * report.train_accuracy,
        100.0 * report.test.accuracy,
        report.test.unseen.len()
    );
    fs::write(out.join(FINETUNE_FILE), &csv)?;
    save_encoder(&out.join(format!("finetuned_{label}.iicwgt")), encoder.config(), &report.params)?;
    if !report.test.unseen.is_empty() {
        eprintln!("warning: {} test videos have labels absent from training", report.test.unseen.len());
    }
    print!("{csv}");
    Ok(())
}

fn report(run: &Path) -> Result<()> {
    if !run.is_dir() {
        return Err(IicError::InvalidArgument(format!("{} is not a directory", run.display())));
    }
    let mut printed = false;
    let loss = run.join(LOSS_FILE);
    if loss.is_file() {
        let (first, last) = epoch_means(&fs::read_to_string(&loss)?)?;
        println!("loss: first epoch {first:.4}, last epoch {last:.4}, ratio {:.3}", last / first);
        printed = true;
    }
    for name in [REPORT_FILE, FINETUNE_FILE] {
        let path = run.join(name);
        if path.is_file() {
            print!("{}", fs::read_to_string(path)?);
            printed = true;
        }
    }
    if !printed {
        return Err(IicError::Data(format!("no artifacts found in {}", run.display())));
    }
    Ok(())
}

/// First and last epoch means of a loss CSV.
fn epoch_means(csv: &str) -> Result<(f64, f64)> {
    let mut sums: Vec<(usize, f64, usize)> = Vec::new();
    for (n, line) in csv.lines().enumerate().skip(1) {
        let bad = || IicError::Data(format!("{LOSS_FILE} line {}: {line:?}", n + 1));
        let mut fields = line.split(',');
        let epoch: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let loss: f64 = fields.nth(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        match sums.last_mut() {
            Some((e, s, c)) if *e == epoch => {
                *s += loss;
                *c += 1;
            }
            _ => sums.push((epoch, loss, 1)),
        }
    }
    let mean = |&(_, s, c): &(usize, f64, usize)| s / c as f64;
    match (sums.first(), sums.last()) {
        (Some(a), Some(b)) => Ok((mean(a), mean(b))),
        _ => Err(IicError::Data(format!("{LOSS_FILE} has no rows"))),
    }
}
