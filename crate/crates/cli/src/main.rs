mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use config::{RunConfig, UsageError};
use mdn_core::dataset::{self, Split};
use mdn_core::eval::{self, format_table, match_points, metrics, metrics_csv};
use mdn_core::network::{self, Checkpoint};
use mdn_core::pipeline::{self, Detection};
use mdn_core::synth::{build_patches, generate_dataset};

#[derive(Parser)]
#[command(
    name = "mdn",
    version,
    about = "Multi-point detection with a mixture density network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of mixture components.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Tiling stride at inference.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    e_thresh: Option<f64>,
    #[arg(long)]
    alpha_thresh: Option<f64>,
    /// Matching radius in pixels.
    #[arg(long)]
    radius: Option<f64>,
    /// Fraction of training annotations to remove.
    #[arg(long)]
    drop: Option<f64>,
    /// Threads for per-patch inference.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (first half train, second half test).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path; the loss curve goes next to it as `.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Detect points in one image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix for `_detections.csv` and `_probmap.png`.
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw map as CSV.
        #[arg(long)]
        probmap_csv: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the metrics as CSV as well.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare training on full and on thinned annotations.
    Sparse {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.k {
            cfg.network.k = v;
        }
        if let Some(v) = self.epochs {
            cfg.network.epochs = v;
        }
        if let Some(v) = self.stride {
            cfg.detect.stride = v;
        }
        if let Some(v) = self.e_thresh {
            cfg.detect.e_thresh = v;
        }
        if let Some(v) = self.alpha_thresh {
            cfg.detect.alpha_thresh = v;
        }
        if let Some(v) = self.radius {
            cfg.radius_px = v;
        }
        if let Some(v) = self.drop {
            cfg.drop_fraction = v;
        }
        if let Some(v) = self.workers {
            cfg.detect.workers = v;
        }
        cfg.finish()
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| {
        mdn_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn print(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

fn cmd_synth(out: &Path, images: Option<usize>, common: &Common) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(n) = images {
        cfg.images = n;
    }
    if cfg.images == 0 {
        return Err(UsageError("--images must be at least 1".into()).into());
    }
    let data = generate_dataset(&cfg.scene, cfg.images, "img")?;
    let splits = dataset::halves(data.len());
    dataset::write_dataset(out, &data, &splits)?;
    let centers: usize = data.iter().map(|d| d.centers.len()).sum();
    let train = splits.iter().filter(|s| **s == Split::Train).count();
    print(&format!(
        "wrote {} images ({} train, {} test) with {} centers to {}\n",
        data.len(),
        train,
        data.len() - train,
        centers,
        out.display()
    ));
    Ok(())
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn cmd_train(dataset_dir: &Path, out: &Path, common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let data = dataset::load_dataset(dataset_dir)?;
    let train_images = dataset::split_of(&data, Split::Train);
    if train_images.is_empty() {
        return Err(UsageError(format!("{} has no train images", dataset_dir.display())).into());
    }
    let patches = build_patches(
        &train_images,
        cfg.network.patch_size,
        cfg.train_stride,
        &cfg.dilation,
        cfg.seed,
    )?;
    log::info!(
        "training on {} patches from {} images",
        patches.len(),
        train_images.len()
    );
    let outcome = network::train(&patches, &cfg.network)?;
    network::save(&outcome.checkpoint, out)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (i, loss) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    let curve_path = loss_csv_path(out);
    write_text(&curve_path, &csv)?;
    print(&format!(
        "trained {} epochs, final mean patch loss {:.4}; checkpoint {}, curve {}\n",
        outcome.loss_curve.len(),
        outcome.checkpoint.meta().final_loss,
        out.display(),
        curve_path.display()
    ));
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn cmd_detect(
    ck_path: &Path,
    image: &Path,
    out: &Path,
    probmap_csv: bool,
    common: &Common,
) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let checkpoint: Checkpoint = network::load(ck_path)?;
    let img = dataset::load_png(image)?;
    let result = pipeline::detect(&img, &checkpoint, &cfg.detect)?;
    let det_path = with_suffix(out, "_detections.csv");
    let map_path = with_suffix(out, "_probmap.png");
    pipeline::write_detections_csv(&det_path, &result.detections)?;
    pipeline::write_probmap_png(&map_path, &result.map)?;
    if probmap_csv {
        pipeline::write_probmap_csv(&with_suffix(out, "_probmap.csv"), &result.map)?;
    }
    print(&format!(
        "{} detections; wrote {} and {}\n",
        result.detections.len(),
        det_path.display(),
        map_path.display()
    ));
    Ok(())
}

fn cmd_eval(
    detections: &Path,
    gt: &Path,
    out: Option<&Path>,
    common: &Common,
) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let dets: Vec<Detection> = pipeline::read_detections_csv(detections)?;
    let gts = dataset::read_centers_csv(gt)?;
    let result = match_points(
        &eval::detection_points(&dets),
        &eval::center_points(&gts),
        cfg.radius_px,
    );
    let report = metrics(&[result]);
    let name = detections.file_stem().map_or_else(
        || "detections".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    let rows = [(name.as_str(), &report)];
    print(&format_table(&rows));
    if let Some(path) = out {
        write_text(path, &metrics_csv(&rows))?;
    }
    Ok(())
}

fn cmd_sparse(dataset_dir: &Path, out: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    let data = dataset::load_dataset(dataset_dir)?;
    let report = eval::sparse_experiment(&data, cfg.drop_fraction, &cfg.experiment())?;
    print(&report.table());
    let (dp, dr, df) = report.deltas();
    print(&format!(
        "drop {:.2}: delta precision {dp:+.3}, recall {dr:+.3}, F1 {df:+.3}\n",
        report.drop_fraction
    ));
    if let Some(path) = out {
        write_text(
            path,
            &metrics_csv(&[("full", &report.full), ("sparse", &report.sparse)]),
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth {
            out,
            images,
            common,
        } => cmd_synth(out, *images, common),
        Command::Train {
            dataset,
            out,
            common,
        } => cmd_train(dataset, out, common),
        Command::Detect {
            checkpoint,
            image,
            out,
            probmap_csv,
            common,
        } => cmd_detect(checkpoint, image, out, *probmap_csv, common),
        Command::Eval {
            detections,
            gt,
            out,
            common,
        } => cmd_eval(detections, gt, out.as_deref(), common),
        Command::Sparse {
            dataset,
            out,
            common,
        } => cmd_sparse(dataset, out.as_deref(), common),
    }
    .context(command_name(&cli.command))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth failed",
        Command::Train { .. } => "train failed",
        Command::Detect { .. } => "detect failed",
        Command::Eval { .. } => "eval failed",
        Command::Sparse { .. } => "sparse failed",
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<mdn_core::Error>() {
        Some(
            mdn_core::Error::Io { .. }
            | mdn_core::Error::Format { .. }
            | mdn_core::Error::Image { .. },
        ) => 2,
        Some(mdn_core::Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MDN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
