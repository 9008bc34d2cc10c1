//! Command-line front end: `train`, `eval` and `dump-embeddings`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed input, architecture mismatch), 3 numeric
//! failure (non-finite values, divergence).
//!
//! Files written to the run's `out_dir`:
//!
//! - `config.resolved`: every key with its resolved value.
//! - `train_log.tsv`: `episode  lr  train_loss  val_accuracy`, one row per
//!   training episode; `val_accuracy` is empty except after validation.
//! - `checkpoint.bin` (final parameters and Adam state) and `best.bin`
//!   (best validation parameters).
//! - `eval_report.txt` (`key: value` lines, see
//!   [`EvalReport::to_text`]) and `eval_seeds.tsv`
//!   (`seed  mean_accuracy  ci95_half_width`).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use crate::config::{DatasetSource, RunConfig};
use crate::data::{
    augment_rotations, load_image_dataset, split_classes, synth_dataset, Dataset, LoadOptions, Split,
    SynthParams,
};
use crate::episode::sample_episode;
use crate::error::{Error, Result};
use crate::eval::{meta_test, EvalReport};
use crate::graph::Graph;
use crate::model::{network, Architecture, FewShotModel, ModelParams};
use crate::rng::{stream, Stream};
use crate::train::{log_header, meta_train_observed, TrainOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot learning with channel-wise attention aggregation"
)]
struct Cli {
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train a model.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the test split.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Write support, query, aggregated and mean embeddings of one test
    /// episode as TSV.
    DumpEmbeddings {
        checkpoint: PathBuf,
        config: PathBuf,
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(("seed", seed.to_string()));
    }
    if let Some(dir) = &cli.out_dir {
        overrides.push(("out_dir", dir.to_string_lossy().into_owned()));
    }
    match &cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(config, &overrides)?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval { checkpoint, config } => {
            let cfg = RunConfig::load(config, &overrides)?;
            let report = cmd_eval(checkpoint, &cfg)?;
            if !cli.quiet {
                print!("{}", report.to_text());
            }
            Ok(())
        }
        Command::DumpEmbeddings {
            checkpoint,
            config,
            out,
        } => {
            let cfg = RunConfig::load(config, &overrides)?;
            cmd_dump_embeddings(checkpoint, &cfg, out)
        }
    }
}

/// Loads or generates the raw dataset, then splits and (optionally)
/// rotation-augments it. A `dataset_cache` file, when present, replaces
/// loading/generation entirely.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let raw = match &cfg.dataset_cache {
        Some(path) if path.exists() => load_dataset(path)?,
        cache => {
            let ds = match cfg.dataset {
                DatasetSource::Synth => synth_dataset(&SynthParams {
                    num_classes: cfg.synth_classes,
                    per_class: cfg.synth_per_class,
                    image_size: cfg.image_size,
                    noise_sd: cfg.synth_noise,
                    outlier_rate: cfg.synth_outlier_rate,
                    seed: cfg.seed,
                })?,
                DatasetSource::Images => {
                    let root = cfg
                        .image_root
                        .as_ref()
                        .ok_or_else(|| Error::Config("image_root is not set".into()))?;
                    let report = load_image_dataset(
                        root,
                        &LoadOptions {
                            target_size: cfg.image_size,
                            grayscale: cfg.grayscale,
                            invert: cfg.invert,
                        },
                    )?;
                    if !report.skipped.is_empty() {
                        log::warn!("skipped {} undecodable files", report.skipped.len());
                    }
                    report.dataset
                }
            };
            if let Some(path) = cache {
                save_dataset(path, &ds)?;
            }
            ds
        }
    };
    if raw.height != cfg.image_size || raw.width != cfg.image_size {
        return Err(Error::Data(format!(
            "dataset images are {}x{} but image_size = {}",
            raw.height, raw.width, cfg.image_size
        )));
    }
    let ds = split_classes(raw, cfg.split, &mut stream(cfg.seed, Stream::Split))
        .map_err(|e| Error::Data(e.to_string()))?;
    if cfg.rotate {
        augment_rotations(&ds)
    } else {
        Ok(ds)
    }
}

pub fn architecture(cfg: &RunConfig, ds: &Dataset) -> Architecture {
    Architecture::standard(ds.channels, cfg.image_size, cfg.last_pool, cfg.m_max)
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("config.resolved"), &cfg.to_text())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    create_out_dir(cfg)?;
    let ds = build_dataset(cfg)?;
    let (tr, va, te) = ds.split_sizes();
    log::info!("dataset: {} ({tr}/{va}/{te} classes)", ds.provenance);
    let params = ModelParams::init(architecture(cfg, &ds), &mut stream(cfg.seed, Stream::Init))?;
    let model = FewShotModel::new(params, cfg.forward_options());

    let log_path = cfg.out_dir.join("train_log.tsv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let _ = writeln!(log, "{}", log_header());
    let outcome = meta_train_observed(model, &ds, &cfg.train_config(), |row| {
        if let Err(e) = writeln!(log, "{}", row.to_tsv()) {
            write_err.get_or_insert(e);
        }
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let outcome = outcome?;
    save_checkpoint(
        &cfg.out_dir.join("checkpoint.bin"),
        &outcome.model,
        Some(&outcome.adam),
    )?;
    save_checkpoint(&cfg.out_dir.join("best.bin"), &outcome.best, None)?;
    if let (Some(init), Some(best)) = (outcome.initial_val, outcome.best_val) {
        log::info!("validation accuracy: initial {init:.4}, best {best:.4}");
    }
    Ok(outcome)
}

/// Loads `checkpoint`, checks it fits the configured data and runs the
/// configured aggregation mode on the test split.
fn load_for(checkpoint: &Path, cfg: &RunConfig, ds: &Dataset) -> Result<FewShotModel> {
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let want = architecture(cfg, ds);
    let have = model.arch();
    if have.in_channels != want.in_channels
        || have.image_size != want.image_size
        || have.last_pool != want.last_pool
        || have.m_max < cfg.ways.max(cfg.shots)
    {
        return Err(Error::Data(format!(
            "checkpoint architecture {have:?} does not match the configuration ({want:?})"
        )));
    }
    model.options = cfg.forward_options();
    Ok(model)
}

pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    create_out_dir(cfg)?;
    let ds = build_dataset(cfg)?;
    let model = load_for(checkpoint, cfg, &ds)?;
    let spec = cfg.episode_spec(Split::Test);
    let report = meta_test(&model, &ds, &spec, cfg.eval_tasks, cfg.seed, cfg.eval_seeds)?;
    write_file(&cfg.out_dir.join("eval_report.txt"), &report.to_text())?;
    write_file(&cfg.out_dir.join("eval_seeds.tsv"), &report.to_tsv())?;
    Ok(report)
}

/// TSV with header `kind  class  v0 .. v{d-1}`. `kind` is `support`,
/// `query`, `aggregated` (class representative) or `mean` (plain class
/// mean of the support rows); `class` is the dataset class index.
pub fn cmd_dump_embeddings(checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = build_dataset(cfg)?;
    let model = load_for(checkpoint, cfg, &ds)?;
    let mut rng = stream(cfg.seed, Stream::Dump);
    let ep = sample_episode(&ds, &cfg.episode_spec(Split::Test), &mut rng)?;
    let mut g = Graph::new();
    let pv = model.params.register(&mut g, false);
    let fwd = network::episode_forward(&mut g, &pv, model.arch(), model.options, &ep, None, &mut rng)?;
    let d = model.arch().embedding_len()?;

    let mut text = String::from("kind\tclass");
    for i in 0..d {
        text.push_str(&format!("\tv{i}"));
    }
    text.push('\n');
    let mut row = |kind: &str, class: usize, values: &[f64]| {
        text.push_str(kind);
        text.push('\t');
        text.push_str(&class.to_string());
        for v in values {
            text.push('\t');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    };
    let support = g.value(fwd.support_embeddings).data();
    for (r, &label) in ep.support_labels.iter().enumerate() {
        row("support", ep.classes[label], &support[r * d..(r + 1) * d]);
    }
    let query = g.value(fwd.query_embeddings).data();
    for (r, &label) in ep.query_labels.iter().enumerate() {
        row("query", ep.classes[label], &query[r * d..(r + 1) * d]);
    }
    for (c, &rep) in fwd.representatives.iter().enumerate() {
        row("aggregated", ep.classes[c], g.value(rep).data());
    }
    for c in 0..ep.ways() {
        let rows = ep.support_rows(c);
        let mut mean = vec![0.0; d];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(&support[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        row("mean", ep.classes[c], &mean);
    }
    write_file(out, &text)
}
