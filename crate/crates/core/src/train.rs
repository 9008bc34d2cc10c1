//! Episodic meta-training with Adam, per-episode dropout masks and
//! model selection on the validation split.

use crate::data::{Dataset, Split};
use crate::episode::{sample_episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::eval::run_tasks;
use crate::model::{FewShotModel, TaskDropoutMask};
use crate::optim::{AdamState, HalvingSchedule};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Training task family; the split field is ignored (always train).
    pub spec: EpisodeSpec,
    pub meta_batch: usize,
    pub lr: f64,
    /// Episodes between learning-rate halvings.
    pub lr_halving: usize,
    pub episodes: usize,
    /// Validate every this many episodes (and after the last one).
    pub val_every: usize,
    /// Validation tasks per check; 0 disables validation.
    pub val_tasks: usize,
    /// Channel keep probability; 1 disables dropout.
    pub keep: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(spec: EpisodeSpec, episodes: usize, seed: u64) -> Self {
        TrainConfig {
            spec,
            meta_batch: 4,
            lr: 0.001,
            lr_halving: 20_000,
            episodes,
            val_every: 1000,
            val_tasks: 200,
            keep: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.meta_batch == 0 || self.lr_halving == 0 || self.val_every == 0 {
            return Err(Error::Parameter(
                "meta_batch, lr_halving and val_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {}", self.lr)));
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Parameter(format!(
                "keep probability {} not in (0, 1]",
                self.keep
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> HalvingSchedule {
        HalvingSchedule {
            initial: self.lr,
            period: self.lr_halving,
        }
    }
}

/// One training-log row per episode.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based episode number.
    pub episode: usize,
    /// Learning rate of the optimizer step this episode contributed to.
    pub lr: f64,
    pub train_loss: f64,
    /// Validation accuracy measured right after this episode's step.
    pub val_accuracy: Option<f64>,
}

pub fn log_header() -> &'static str {
    "episode\tlr\ttrain_loss\tval_accuracy"
}

impl LogRow {
    pub fn to_tsv(&self) -> String {
        let val = self.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        format!("{}\t{}\t{}\t{}", self.episode, self.lr, self.train_loss, val)
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub episodes: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FewShotModel,
    pub adam: AdamState,
    /// Parameters with the highest validation accuracy seen, including
    /// the untrained initial ones; equal to `model` without validation.
    pub best: FewShotModel,
    pub best_val: Option<f64>,
    pub initial_val: Option<f64>,
    pub log: Vec<LogRow>,
    pub steps: Vec<StepRecord>,
}

/// Mean per-task accuracy on `val_tasks` validation tasks. The tasks are
/// the same at every call for a given seed.
pub fn validation_accuracy(model: &FewShotModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let spec = cfg.spec.with_split(Split::Validation);
    let mut episodes = stream(cfg.seed, Stream::Validation);
    let mut shuffle = stream(cfg.seed, Stream::EvalShuffle);
    let (accs, _) = run_tasks(model, dataset, &spec, cfg.val_tasks, &mut episodes, &mut shuffle)?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn meta_train(model: FewShotModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    meta_train_observed(model, dataset, cfg, |_| {})
}

/// [`meta_train`] calling `observe` on every log row as it is produced.
pub fn meta_train_observed(
    mut model: FewShotModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.spec.with_split(Split::Train);
    let schedule = cfg.schedule();
    let channels = model.arch().embed_filters;
    let mut adam = AdamState::new(model.params.tensors());
    let mut episodes_rng = stream(cfg.seed, Stream::TrainEpisodes);
    let mut mask_rng = stream(cfg.seed, Stream::DropoutMasks);
    let mut shuffle_rng = stream(cfg.seed, Stream::TrainShuffle);

    let validating = cfg.val_tasks > 0;
    let initial_val = if validating {
        Some(validation_accuracy(&model, dataset, cfg)?)
    } else {
        None
    };
    let mut best = model.clone();
    let mut best_val = initial_val;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut steps = Vec::new();

    let mut seen = 0;
    while seen < cfg.episodes {
        let batch = cfg.meta_batch.min(cfg.episodes - seen);
        let lr = schedule.lr_at(seen);
        let mut sum: Option<Vec<Tensor>> = None;
        let mut losses = Vec::with_capacity(batch);
        for i in 0..batch {
            let episode_no = seen + i + 1;
            let ep = sample_episode(dataset, &spec, &mut episodes_rng)?;
            let mask = if cfg.keep < 1.0 {
                Some(TaskDropoutMask::sample(&mut mask_rng, cfg.keep, channels)?)
            } else {
                None
            };
            let (loss, grads) = model
                .loss_and_grads(&ep, mask.as_ref(), &mut shuffle_rng)
                .map_err(|e| diverged(e, episode_no))?;
            losses.push(loss);
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = sum.expect("batch is non-empty");
        let scale = 1.0 / batch as f64;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        adam.step(&mut model.params.tensors_mut(), &grads, lr)?;
        if model.params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                episode: seen + batch,
                loss: f64::NAN,
            });
        }
        let step_loss = losses.iter().sum::<f64>() / batch as f64;
        steps.push(StepRecord {
            episodes: batch,
            lr,
            loss: step_loss,
        });

        let before = seen;
        seen += batch;
        let crossed = seen / cfg.val_every > before / cfg.val_every || seen == cfg.episodes;
        let val = if validating && crossed {
            let acc = validation_accuracy(&model, dataset, cfg)?;
            if best_val.is_none_or(|b| acc > b) {
                best_val = Some(acc);
                best = model.clone();
            }
            log::info!("episode {seen}: loss {step_loss:.4}, validation accuracy {acc:.4}");
            Some(acc)
        } else {
            None
        };
        for (i, &loss) in losses.iter().enumerate() {
            let row = LogRow {
                episode: before + i + 1,
                lr,
                train_loss: loss,
                val_accuracy: if i + 1 == batch { val } else { None },
            };
            observe(&row);
            log.push(row);
        }
    }
    if !validating {
        best = model.clone();
    }
    Ok(TrainOutcome {
        model,
        adam,
        best,
        best_val,
        initial_val,
        log,
        steps,
    })
}

fn diverged(e: Error, episode: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            episode,
            loss: f64::NAN,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_classes, synth_dataset, SynthParams};
    use crate::model::{Architecture, ForwardOptions, ModelParams};

    fn setup(keep: f64, episodes: usize) -> (FewShotModel, Dataset, TrainConfig) {
        let ds = synth_dataset(&SynthParams {
            num_classes: 12,
            per_class: 6,
            image_size: 12,
            noise_sd: 0.1,
            outlier_rate: 0.0,
            seed: 2,
        })
        .unwrap();
        let ds = split_classes(ds, (6, 3, 3), &mut stream(2, Stream::Split)).unwrap();
        let mut arch = Architecture::standard(1, 12, false, 3);
        arch.embed_filters = 8;
        arch.attention_filters = 4;
        let params = ModelParams::init(arch, &mut stream(2, Stream::Init)).unwrap();
        let model = FewShotModel::new(params, ForwardOptions::default());
        let mut cfg = TrainConfig::new(EpisodeSpec::new(3, 1, 2, Split::Train), episodes, 2);
        cfg.keep = keep;
        cfg.val_every = 4;
        cfg.val_tasks = 3;
        (model, ds, cfg)
    }

    #[test]
    fn zero_episodes_returns_initial_params() {
        let (model, ds, cfg) = setup(0.5, 0);
        let out = meta_train(model.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.best, model);
        assert!(out.log.is_empty());
        assert_eq!(out.adam.t, 0);
    }

    #[test]
    fn meta_batches_of_four() {
        let (model, ds, cfg) = setup(0.5, 10);
        let out = meta_train(model, &ds, &cfg).unwrap();
        let sizes: Vec<usize> = out.steps.iter().map(|s| s.episodes).collect();
        assert_eq!(sizes, [4, 4, 2]);
        assert_eq!(out.adam.t, 3);
        assert_eq!(out.log.len(), 10);
        assert_eq!(
            out.log.iter().map(|r| r.episode).collect::<Vec<_>>(),
            (1..=10).collect::<Vec<_>>()
        );
        let validated: Vec<usize> = out
            .log
            .iter()
            .filter(|r| r.val_accuracy.is_some())
            .map(|r| r.episode)
            .collect();
        assert_eq!(validated, [4, 8, 10]);
    }

    #[test]
    fn training_is_reproducible() {
        let (model, ds, cfg) = setup(0.5, 6);
        let a = meta_train(model.clone(), &ds, &cfg).unwrap();
        let b = meta_train(model, &ds, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn dropout_only_changes_what_it_touches() {
        // Same episodes and initial state; the first mask is drawn for
        // episode 1, so divergence starts there.
        let (model, ds, cfg) = setup(1.0, 4);
        let plain = meta_train(model.clone(), &ds, &cfg).unwrap();
        let drop_cfg = TrainConfig {
            keep: 0.5,
            ..cfg.clone()
        };
        let dropped = meta_train(model, &ds, &drop_cfg).unwrap();
        assert_ne!(plain.log[0].train_loss, dropped.log[0].train_loss);
        assert_eq!(plain.initial_val, dropped.initial_val);
    }

    #[test]
    fn rejects_bad_config() {
        let (model, ds, mut cfg) = setup(0.5, 4);
        cfg.keep = 0.0;
        assert!(matches!(
            meta_train(model.clone(), &ds, &cfg),
            Err(Error::Parameter(_))
        ));
        cfg.keep = 1.0;
        cfg.meta_batch = 0;
        assert!(meta_train(model, &ds, &cfg).is_err());
    }
}
