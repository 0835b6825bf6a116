use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use semiseg::checkpoint::Checkpoint;
use semiseg::config::RunConfig;
use semiseg::data::{generate_synthetic, load_dataset, load_image, read_splits, save_png, split_from_ids, Split};
use semiseg::metrics::MetricReport;
use semiseg::pipeline::BinarizePolicy;
use semiseg::trainer::{evaluate, predict, train, EvalReport, CHECKPOINT_DIR};
use semiseg::FusionMode;

#[derive(Parser)]
#[command(name = "semiseg", version, about = "Semi-supervised lesion segmentation with inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with masks and a splits.json.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(32..))]
        size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train once per labeled ratio and tabulate test metrics.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.5, 1.0])]
        ratios: Vec<f64>,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// A splits.json to use instead of the dataset's own.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Defaults to report.json next to the checkpoint directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write coarse map, fine map, overlay, masked input and reconstruction.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Re-split the dataset with this ratio instead of using its splits.json.
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Gff,
    Add,
    Concat,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Gff => FusionMode::Gff,
            FusionArg::Add => FusionMode::Add,
            FusionArg::Concat => FusionMode::Concat,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Labeled,
    Val,
    Test,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.data = Some(self.data.clone());
        cfg.out = Some(self.out.clone());
        if let Some(f) = self.fusion {
            cfg.fusion = f.into();
        }
        if let Some(r) = self.labeled_ratio {
            cfg.split.labeled_ratio = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_training(cfg: &RunConfig, data: &Split, out: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join("config.json"))?;
    semiseg::data::write_splits(out, &data.ids())?;
    eprintln!(
        "training {} fusion on {} labeled / {} unlabeled, {} val",
        cfg.fusion,
        data.labeled.len(),
        data.unlabeled.len(),
        data.val.len()
    );
    let outcome = train(&cfg.arch, cfg.fusion, &cfg.train, data, Some(out), |log| {
        let val = log.val_dice.map_or("-".into(), |d| format!("{:.2}", 100.0 * d));
        eprintln!(
            "epoch {:>3}  lr {:.2e}  seg {:>8.4}  inp {:>8.4}  val dice {val}",
            log.epoch,
            log.lr,
            log.loss_seg.unwrap_or(f64::NAN),
            log.loss_inp.unwrap_or(f64::NAN),
        );
    })?;
    eprintln!("best checkpoint in {}", out.join(CHECKPOINT_DIR).display());
    Ok(outcome.best)
}

fn print_table(label: &str, r: &MetricReport) {
    let [dice, iou, acc, rec, spe] = r.as_percentages();
    println!("{:<12} {:>7} {:>7} {:>7} {:>7} {:>7}", "", "Dice", "IoU", "Acc", "Rec", "Spe");
    println!("{label:<12} {dice:>7.2} {iou:>7.2} {acc:>7.2} {rec:>7.2} {spe:>7.2}");
}

fn cmd_train(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let data = cfg.load_split(run.labeled_ratio.is_none())?;
    let best = run_training(&cfg, &data, &run.out)?;
    if !data.test.is_empty() {
        let mut params = best.params;
        let report = evaluate(&mut params, &data.test, &cfg.train.binarize)?;
        print_table("test", &report.mean);
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, ratios: &[f64]) -> Result<()> {
    let base = run.resolve()?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        let mut cfg = base.clone();
        cfg.split.labeled_ratio = ratio;
        cfg.validate()?;
        let data = cfg.load_split(false)?;
        if data.test.is_empty() {
            bail!("the sweep needs a test split; set split.test > 0");
        }
        let out = run.out.join(format!("ratio_{:03}", (ratio * 100.0).round() as u32));
        let mut params = run_training(&cfg, &data, &out)?.params;
        let report = evaluate(&mut params, &data.test, &cfg.train.binarize)?;
        print_table(&format!("{:.0}% labeled", 100.0 * ratio), &report.mean);
        rows.push((ratio, data.labeled.len(), report.mean));
    }
    let path = run.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["labeled_ratio", "n_labeled", "dice", "iou", "acc", "rec", "spe"])?;
    for (ratio, n, r) in rows {
        let mut record = vec![ratio.to_string(), n.to_string()];
        record.extend(r.as_percentages().iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, which: SplitName, splits: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let ckpt_data = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let samples = load_dataset(data)?;
    let ids = match splits {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => read_splits(data)?,
    }
    .with_context(|| format!("no splits.json for {}", data.display()))?;
    let split = split_from_ids(&samples, &ids)?;
    let (name, set) = match which {
        SplitName::Labeled => ("labeled", &split.labeled),
        SplitName::Val => ("val", &split.val),
        SplitName::Test => ("test", &split.test),
    };
    if set.is_empty() {
        bail!("the {name} split is empty");
    }
    let mut params = ckpt_data.params;
    let result: EvalReport = evaluate(&mut params, set, &BinarizePolicy::default())?;
    print_table(name, &result.mean);
    let path = match report {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("report.json"),
    };
    let [dice, iou, acc, rec, spe] = result.mean.as_percentages();
    let json = serde_json::json!({
        "split": name,
        "images": set.len(),
        "percent": { "dice": dice, "iou": iou, "acc": acc, "rec": rec, "spe": spe },
        "per_image": result.per_image,
    });
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, out_dir: &Path) -> Result<()> {
    let mut params = Checkpoint::load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?
        .params;
    let raster = load_image(image)?;
    let p = predict(&mut params, &raster, &BinarizePolicy::default())?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, r) in [
        ("y_coarse", &p.y_coarse),
        ("y_fine1", &p.y_fine),
        ("overlay", &p.overlay),
        ("x_mask", &p.x_mask),
        ("x_hat1", &p.x_hat),
    ] {
        save_png(&out_dir.join(format!("{name}.png")), r)?;
    }
    println!("wrote 5 images to {}", out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { out, n, size, seed } => {
            generate_synthetic(*n as usize, *size as usize, *seed, out)
                .map(|s| println!("wrote {} samples to {}", s.len(), out.display()))
                .map_err(Into::into)
        }
        Command::Train { run } => cmd_train(run),
        Command::Sweep { run, ratios } => cmd_sweep(run, ratios),
        Command::Eval {
            ckpt,
            data,
            split,
            splits,
            report,
        } => cmd_eval(ckpt, data, *split, splits.as_deref(), report.as_deref()),
        Command::Predict { ckpt, image, out_dir } => cmd_predict(ckpt, image, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
