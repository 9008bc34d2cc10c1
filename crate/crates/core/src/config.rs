//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default (see [`KEYS`]); unknown or repeated keys are
//! rejected. Values are resolved in this order, later winning:
//! defaults, the file, environment variables `FEWSHOT_<KEY>` (key
//! upper-cased, e.g. `FEWSHOT_EPISODES=100`), command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::{mode_name, parse_mode};
use crate::data::Split;
use crate::episode::EpisodeSpec;
use crate::error::{Error, Result};
use crate::model::{AggregationMode, ForwardOptions};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "FEWSHOT_";

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "mode",
        "l2ae",
        "aggregation: l2ae (learned attention) or mean-baseline",
    ),
    (
        "one_shot_softmax",
        "false",
        "apply softmax to one-shot attention weights too",
    ),
    ("ways", "5", "classes per task"),
    ("shots", "1", "support examples per class"),
    ("queries", "15", "query examples per class"),
    ("m_max", "auto", "attention output width; auto = max(ways, shots)"),
    (
        "last_pool",
        "false",
        "keep max pooling in the last embedding block",
    ),
    ("meta_batch", "4", "episodes per optimizer step"),
    ("lr", "0.001", "initial Adam learning rate"),
    ("lr_halving", "20000", "episodes between learning-rate halvings"),
    ("episodes", "2000", "total training episodes"),
    ("val_every", "1000", "episodes between validation checks"),
    ("val_tasks", "200", "tasks per validation check; 0 disables"),
    ("keep", "0.5", "dropout keep probability; 1 disables dropout"),
    ("seed", "0", "root of every random stream"),
    ("eval_seeds", "10", "evaluation seeds"),
    ("eval_tasks", "600", "tasks per evaluation seed"),
    ("dataset", "synth", "synth or images"),
    ("image_root", "", "directory of class folders (dataset = images)"),
    (
        "image_size",
        "28",
        "square side images are resized to / generated at",
    ),
    ("grayscale", "true", "collapse colour images to one channel"),
    ("invert", "false", "replace pixel v by 1 - v after loading"),
    (
        "rotate",
        "false",
        "add 90/180/270 degree rotations as new classes",
    ),
    (
        "split",
        "20,5,5",
        "train,validation,test class counts (before rotation)",
    ),
    ("synth_classes", "30", "synthetic classes"),
    ("synth_per_class", "20", "synthetic examples per class"),
    (
        "synth_noise",
        "0.1",
        "synthetic per-pixel noise standard deviation",
    ),
    (
        "synth_outlier_rate",
        "0.0",
        "probability an example shows another class",
    ),
    (
        "dataset_cache",
        "",
        "load the dataset from this file, writing it first if absent",
    ),
    ("out_dir", "run", "directory for run artifacts"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synth,
    Images,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: AggregationMode,
    pub one_shot_softmax: bool,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub m_max: usize,
    pub last_pool: bool,
    pub meta_batch: usize,
    pub lr: f64,
    pub lr_halving: usize,
    pub episodes: usize,
    pub val_every: usize,
    pub val_tasks: usize,
    pub keep: f64,
    pub seed: u64,
    pub eval_seeds: u32,
    pub eval_tasks: usize,
    pub dataset: DatasetSource,
    pub image_root: Option<PathBuf>,
    pub image_size: usize,
    pub grayscale: bool,
    pub invert: bool,
    pub rotate: bool,
    pub split: (usize, usize, usize),
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_noise: f64,
    pub synth_outlier_rate: f64,
    pub dataset_cache: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Resolved raw values by key.
    raw: BTreeMap<&'static str, String>,
}

fn lookup(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(k, _, _)| *k)
}

/// Parses `text` into `(key, value)` pairs, rejecting malformed lines and
/// unknown or repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(&'static str, String)>> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let key = lookup(k.trim())
            .ok_or_else(|| Error::Config(format!("line {}: unknown key {:?}", no + 1, k.trim())))?;
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn typed<T: std::str::FromStr>(raw: &BTreeMap<&str, String>, key: &str) -> Result<T> {
    let v = &raw[key];
    v.parse()
        .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {v:?}")))
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Defaults overridden by `text`, then by `env`, then by `overrides`.
    pub fn resolve(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(&str, String)],
    ) -> Result<Self> {
        let mut raw: BTreeMap<&'static str, String> =
            KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
        for (k, v) in parse_pairs(text)? {
            raw.insert(k, v);
        }
        for (name, v) in env {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase();
            if let Some(k) = lookup(&key) {
                raw.insert(k, v.trim().to_string());
            }
        }
        for (k, v) in overrides {
            let key = lookup(k).ok_or_else(|| Error::Config(format!("unknown key {k:?}")))?;
            raw.insert(key, v.clone());
        }
        Self::from_raw(raw)
    }

    /// Reads `path` and resolves it against the process environment.
    pub fn load(path: &Path, overrides: &[(&str, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&text, std::env::vars(), overrides)
    }

    fn from_raw(mut raw: BTreeMap<&'static str, String>) -> Result<Self> {
        let mode = parse_mode(&raw["mode"])
            .ok_or_else(|| Error::Config(format!("key \"mode\": unknown mode {:?}", raw["mode"])))?;
        let dataset = match raw["dataset"].as_str() {
            "synth" => DatasetSource::Synth,
            "images" => DatasetSource::Images,
            other => {
                return Err(Error::Config(format!(
                    "key \"dataset\": unknown source {other:?}"
                )))
            }
        };
        let split: Vec<usize> = raw["split"]
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("key \"split\": cannot parse {:?}", raw["split"])))?;
        let [train, val, test] = split[..] else {
            return Err(Error::Config("key \"split\": expected three counts".into()));
        };
        let ways: usize = typed(&raw, "ways")?;
        let shots: usize = typed(&raw, "shots")?;
        let m_max = match raw["m_max"].as_str() {
            "auto" => ways.max(shots),
            _ => typed(&raw, "m_max")?,
        };
        raw.insert("mode", mode_name(mode).to_string());
        let cfg = RunConfig {
            mode,
            one_shot_softmax: typed(&raw, "one_shot_softmax")?,
            ways,
            shots,
            queries: typed(&raw, "queries")?,
            m_max,
            last_pool: typed(&raw, "last_pool")?,
            meta_batch: typed(&raw, "meta_batch")?,
            lr: typed(&raw, "lr")?,
            lr_halving: typed(&raw, "lr_halving")?,
            episodes: typed(&raw, "episodes")?,
            val_every: typed(&raw, "val_every")?,
            val_tasks: typed(&raw, "val_tasks")?,
            keep: typed(&raw, "keep")?,
            seed: typed(&raw, "seed")?,
            eval_seeds: typed(&raw, "eval_seeds")?,
            eval_tasks: typed(&raw, "eval_tasks")?,
            dataset,
            image_root: path_or_none(&raw["image_root"]),
            image_size: typed(&raw, "image_size")?,
            grayscale: typed(&raw, "grayscale")?,
            invert: typed(&raw, "invert")?,
            rotate: typed(&raw, "rotate")?,
            split: (train, val, test),
            synth_classes: typed(&raw, "synth_classes")?,
            synth_per_class: typed(&raw, "synth_per_class")?,
            synth_noise: typed(&raw, "synth_noise")?,
            synth_outlier_rate: typed(&raw, "synth_outlier_rate")?,
            dataset_cache: path_or_none(&raw["dataset_cache"]),
            out_dir: PathBuf::from(&raw["out_dir"]),
            raw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("key {key:?}: {why}")));
        if self.m_max < self.ways.max(self.shots) {
            return bad("m_max", "must be at least max(ways, shots)");
        }
        if self.eval_seeds == 0 || self.eval_tasks < 2 {
            return bad("eval_tasks", "need at least one seed and two tasks per seed");
        }
        if self.dataset == DatasetSource::Images && self.image_root.is_none() && self.dataset_cache.is_none()
        {
            return bad("image_root", "required when dataset = images");
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn episode_spec(&self, split: Split) -> EpisodeSpec {
        EpisodeSpec::new(self.ways, self.shots, self.queries, split)
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            mode: self.mode,
            one_shot_softmax: self.one_shot_softmax,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            spec: self.episode_spec(Split::Train),
            meta_batch: self.meta_batch,
            lr: self.lr,
            lr_halving: self.lr_halving,
            episodes: self.episodes,
            val_every: self.val_every,
            val_tasks: self.val_tasks,
            keep: self.keep,
            seed: self.seed,
        }
    }

    /// Every key with its resolved value, loadable by [`RunConfig::resolve`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, doc) in KEYS {
            s.push_str(&format!("# {doc}\n{k} = {}\n", self.raw[k]));
        }
        s
    }
}
