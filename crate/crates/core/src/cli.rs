//! Command-line front end: `preprocess`, `split`, `train`, `evaluate`, `explain`.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error. Every
//! argument is validated before any file is written.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{load_split, read_split_tsv, scan_dataset, split_dataset, write_split_tsv, SplitTag};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{format_table, per_class_to_tsv, report_to_tsv};
use crate::model::{build_leaf_cnn, evaluate, fit, load_weights, save_weights, TrainConfig};
use crate::preprocess::{preprocess_image, PreprocessConfig, RgbImage};
use crate::xai::{explain, heatmap_image, render_overlay, CamMethod, CamRequest, Target};

#[derive(Parser, Debug)]
#[command(name = "leafscope", version, about = "Leaf disease CNN with CAM explanations")]
pub struct Cli {
    /// Seed for splitting, initialisation, shuffling and dropout.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Single worker, fixed reduction order (default).
    #[arg(long, global = true, overrides_with = "no_deterministic")]
    pub deterministic: bool,
    /// Use up to LEAFSCOPE_THREADS workers.
    #[arg(long, global = true)]
    pub no_deterministic: bool,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Remove backgrounds and resize a directory of images.
    Preprocess(PreprocessArgs),
    /// Scan a class-per-directory corpus and write the 80:10:10 manifest.
    Split(SplitArgs),
    /// Train the CNN on the train split.
    Train(TrainArgs),
    /// Evaluate a weight file on one split.
    Evaluate(EvaluateArgs),
    /// Produce a CAM heatmap overlay for one image.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub no_bg_removal: bool,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0001)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Weights of the best-validation epoch.
    #[arg(long, default_value = "model.lsw")]
    pub out: PathBuf,
    /// Weights after the last epoch.
    #[arg(long)]
    pub final_out: Option<PathBuf>,
    #[arg(long, default_value = "history.tsv")]
    pub history: PathBuf,
    #[arg(long)]
    pub no_bg_removal: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitTag,
    #[arg(long, default_value = "report.tsv")]
    pub report: PathBuf,
    /// Also write the confusion matrix as TSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// Also write per-class precision/recall/F1 as TSV.
    #[arg(long)]
    pub per_class: Option<PathBuf>,
    /// Labels for the report row.
    #[arg(long, default_value = "CNN")]
    pub model_name: String,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0001)]
    pub lr: f64,
    #[arg(long)]
    pub no_bg_removal: bool,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: CamMethod,
    #[arg(long, default_value = "conv3")]
    pub layer: String,
    /// Class index or `auto` for the predicted class.
    #[arg(long, default_value = "auto", value_parser = parse_target)]
    pub class: Target,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f32,
    #[arg(long, default_value = "overlay.png")]
    pub out: PathBuf,
    #[arg(long)]
    pub heatmap_tsv: Option<PathBuf>,
    #[arg(long)]
    pub heatmap_png: Option<PathBuf>,
    #[arg(long)]
    pub no_bg_removal: bool,
}

fn parse_method(s: &str) -> std::result::Result<CamMethod, String> {
    s.parse()
}

fn parse_split(s: &str) -> std::result::Result<SplitTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    if s == "auto" {
        return Ok(Target::Auto);
    }
    s.parse()
        .map(Target::Class)
        .map_err(|_| format!("expected a class index or 'auto', got '{s}'"))
}

/// Checks that clap's types cannot express.
fn validate(cli: &Cli) -> std::result::Result<(), String> {
    match &cli.command {
        Command::Preprocess(a) if a.size == 0 => Err("--size must be at least 1".into()),
        Command::Train(a) if a.epochs == 0 => Err("--epochs must be at least 1".into()),
        Command::Train(a) if a.batch == 0 => Err("--batch must be at least 1".into()),
        Command::Train(a) if !(a.lr > 0.0 && a.lr.is_finite()) => Err("--lr must be positive".into()),
        Command::Explain(a) if a.top_k == 0 => Err("--top-k must be at least 1".into()),
        Command::Explain(a) if !(0.0..=1.0).contains(&a.alpha) => Err("--alpha must lie in [0, 1]".into()),
        _ => Ok(()),
    }
}

/// Parses `args` (program name first) and runs the subcommand; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand
            ) {
                eprintln!("error: a subcommand is required (preprocess, split, train, evaluate, explain)");
                return 2;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("error: invalid arguments");
            eprintln!("{first}");
            return 2;
        }
    };
    if let Err(msg) = validate(&cli) {
        eprintln!("error: {msg}");
        return 2;
    }
    exec::set_workers(if cli.no_deterministic {
        exec::workers_from_env()
    } else {
        0
    });
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let log = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a, &log),
        Command::Split(a) => cmd_split(a, cli.seed, &log),
        Command::Train(a) => cmd_train(a, cli.seed, &log),
        Command::Evaluate(a) => cmd_evaluate(a, cli.quiet),
        Command::Explain(a) => cmd_explain(a, cli.quiet),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut items: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    items.sort();
    for p in items {
        let hidden = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if hidden {
            continue;
        }
        if p.is_dir() {
            collect_images(root, &p, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs, log: &dyn Fn(String)) -> Result<()> {
    let cfg = PreprocessConfig {
        background_removal: !a.no_bg_removal,
        size: a.size,
        ..PreprocessConfig::default()
    };
    let mut files = Vec::new();
    collect_images(&a.input, &a.input, &mut files)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus(format!("no images under {}", a.input.display())));
    }
    exec::try_map_indexed(files.len(), |i| {
        let rel = &files[i];
        let img = RgbImage::load(&a.input.join(rel))?;
        let out = RgbImage::from_unit_tensor(&preprocess_image(&img, &cfg)?)?;
        let dest = a.output.join(rel).with_extension("png");
        ensure_parent(&dest)?;
        out.save_png(&dest)
    })?;
    log(format!("preprocessed {} images into {}", files.len(), a.output.display()));
    Ok(())
}

fn cmd_split(a: &SplitArgs, seed: u64, log: &dyn Fn(String)) -> Result<()> {
    let manifest = scan_dataset(&a.input)?;
    let split = split_dataset(&manifest, seed)?;
    ensure_parent(&a.manifest)?;
    write_split_tsv(&a.manifest, &manifest, &split)?;
    log(format!(
        "{} images in {} classes: {} train, {} val, {} test",
        manifest.len(),
        manifest.num_classes(),
        split.count(SplitTag::Train),
        split.count(SplitTag::Val),
        split.count(SplitTag::Test)
    ));
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64, log: &dyn Fn(String)) -> Result<()> {
    let (manifest, split) = read_split_tsv(&a.manifest)?;
    let pcfg = PreprocessConfig {
        background_removal: !a.no_bg_removal,
        ..PreprocessConfig::default()
    };
    let train = load_split(&manifest, &split, SplitTag::Train, &a.images, &pcfg)?;
    let val = load_split(&manifest, &split, SplitTag::Val, &a.images, &pcfg)?;
    log(format!("loaded {} training and {} validation images", train.len(), val.len()));
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed,
    };
    let mut model = build_leaf_cnn(manifest.num_classes(), seed)?;
    let outcome = fit(&mut model, &train, &val, &cfg, |r| {
        log(format!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ))
    })?;
    write_file(&a.history, outcome.history.to_tsv())?;
    if let Some(path) = &a.final_out {
        ensure_parent(path)?;
        save_weights(&model, path)?;
    }
    model.set_weights(outcome.best_weights)?;
    ensure_parent(&a.out)?;
    save_weights(&model, &a.out)?;
    log(format!("best epoch {} saved to {}", outcome.best_epoch, a.out.display()));
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, quiet: bool) -> Result<()> {
    let model = load_weights(&a.model)?;
    let (manifest, split) = read_split_tsv(&a.manifest)?;
    let [_, h, w] = model.input_shape();
    if h != w {
        return Err(Error::Input(format!("model input {h}x{w} is not square")));
    }
    let pcfg = PreprocessConfig {
        background_removal: !a.no_bg_removal,
        size: h,
        ..PreprocessConfig::default()
    };
    let set = load_split(&manifest, &split, a.split, &a.images, &pcfg)?;
    let ev = evaluate(&model, &set)?;
    let rows = [(a.model_name.as_str(), a.epochs, a.lr, &ev.metrics)];
    write_file(&a.report, report_to_tsv(&rows))?;
    if let Some(p) = &a.confusion {
        write_file(p, ev.confusion.to_tsv())?;
    }
    if let Some(p) = &a.per_class {
        write_file(p, per_class_to_tsv(&ev.metrics, &manifest.class_names))?;
    }
    if !quiet {
        let mut out = std::io::stdout().lock();
        let _ = write!(out, "{}", format_table(&rows));
        let _ = writeln!(out, "(macro averages over {} classes, {} images)", manifest.num_classes(), set.len());
    }
    Ok(())
}

fn cmd_explain(a: &ExplainArgs, quiet: bool) -> Result<()> {
    let model = load_weights(&a.model)?;
    let [_, h, w] = model.input_shape();
    if h != w {
        return Err(Error::Input(format!("model input {h}x{w} is not square")));
    }
    let pcfg = PreprocessConfig {
        background_removal: !a.no_bg_removal,
        size: h,
        ..PreprocessConfig::default()
    };
    let img = RgbImage::load(&a.image)?;
    let input = preprocess_image(&img, &pcfg)?;
    let req = CamRequest {
        layer: a.layer.clone(),
        target: a.class,
        method: a.method,
        top_k: a.top_k,
    };
    let heat = explain(&model, &input, &req)?;
    let base = RgbImage::from_unit_tensor(&input)?;
    let overlay = render_overlay(&base, &heat, a.alpha)?;
    ensure_parent(&a.out)?;
    overlay.save_png(&a.out)?;
    if let Some(p) = &a.heatmap_tsv {
        write_file(p, heat.to_tsv())?;
    }
    if let Some(p) = &a.heatmap_png {
        ensure_parent(p)?;
        heatmap_image(&heat).save_png(p)?;
    }
    if !quiet {
        println!(
            "{} on {} for class {} -> {}",
            heat.method,
            heat.source_layer,
            heat.target_class,
            a.out.display()
        );
    }
    Ok(())
}
