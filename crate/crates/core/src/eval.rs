//! Multi-seed meta-testing with 95% confidence intervals.
//!
//! For every evaluation seed, `T` tasks are sampled from the test split
//! and each task is scored by the fraction of its queries classified
//! correctly. Per-task accuracies are what the intervals are computed
//! over.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng as _;

use crate::data::{Dataset, Split};
use crate::episode::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind};
use crate::model::{argmax, euclidean_distance, network, FewShotModel};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Tensor;

/// `(mean, 1.96 · s / √T)` with `s` the sample standard deviation.
pub fn confidence_interval(per_task: &[f64]) -> Result<(f64, f64)> {
    let t = per_task.len();
    if t < 2 {
        return Err(Error::Parameter(format!(
            "a confidence interval needs at least 2 values, got {t}"
        )));
    }
    let n = t as f64;
    let mean = shifted_mean(per_task);
    let ss: f64 = per_task.iter().map(|a| (a - mean) * (a - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    Ok((mean, 1.96 * sd / n.sqrt()))
}

/// Mean computed on deviations from the first value, so a constant
/// sequence returns that constant exactly.
fn shifted_mean(values: &[f64]) -> f64 {
    let shift = values[0];
    shift + values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64
}

/// Query predictions for one episode, plus how many dropout operations
/// the predictor executed while producing them.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub dropout_ops: usize,
}

/// Anything that can label the queries of an episode.
pub trait Predictor {
    fn predict(&self, episode: &Episode, rng: &mut Rng) -> Result<Prediction>;
}

impl Predictor for FewShotModel {
    /// Nearest representative per query, using the whole network.
    fn predict(&self, episode: &Episode, rng: &mut Rng) -> Result<Prediction> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let out = network::episode_forward(&mut g, &pv, self.arch(), self.options, episode, None, rng)?;
        let ways = episode.ways();
        let labels = g
            .value(out.distances)
            .data()
            .chunks_exact(ways)
            .map(|row| {
                let neg: Vec<f64> = row.iter().map(|d| -d).collect();
                argmax(&neg)
            })
            .collect();
        Ok(Prediction {
            labels,
            dropout_ops: g.count(OpKind::Dropout),
        })
    }
}

/// Fraction of `predicted` equal to `truth`.
pub fn task_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} queries",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Per-task accuracies of `tasks` episodes drawn from `episodes`, with
/// one-shot stack orders drawn from `shuffle`.
pub fn run_tasks(
    predictor: &impl Predictor,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    tasks: usize,
    episodes: &mut Rng,
    shuffle: &mut Rng,
) -> Result<(Vec<f64>, usize)> {
    let mut accs = Vec::with_capacity(tasks);
    let mut dropout_ops = 0;
    for _ in 0..tasks {
        let ep = sample_episode(dataset, spec, episodes)?;
        let pred = predictor.predict(&ep, shuffle)?;
        dropout_ops += pred.dropout_ops;
        accs.push(task_accuracy(&pred.labels, &ep.query_labels)?);
    }
    Ok((accs, dropout_ops))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u32,
    pub mean: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tasks_per_seed: usize,
    pub per_seed: Vec<SeedResult>,
    /// Mean over every task of every seed.
    pub mean: f64,
    /// Mean of the per-seed 95% half-widths.
    pub half_width: f64,
    pub best: f64,
    pub worst: f64,
    /// Mean of the per-seed means.
    pub average: f64,
    /// Dropout operations executed while evaluating; zero for a correct
    /// meta-test.
    pub dropout_ops: usize,
}

impl EvalReport {
    /// `key: value` lines, then one `seed.<i>: <mean> ± <half-width>` line
    /// per seed.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seeds: {}", self.per_seed.len());
        let _ = writeln!(s, "tasks_per_seed: {}", self.tasks_per_seed);
        let _ = writeln!(s, "mean_accuracy: {:.6}", self.mean);
        let _ = writeln!(s, "ci95_half_width: {:.6}", self.half_width);
        let _ = writeln!(s, "best_seed_accuracy: {:.6}", self.best);
        let _ = writeln!(s, "worst_seed_accuracy: {:.6}", self.worst);
        let _ = writeln!(s, "average_seed_accuracy: {:.6}", self.average);
        let _ = writeln!(s, "dropout_ops: {}", self.dropout_ops);
        for r in &self.per_seed {
            let _ = writeln!(s, "seed.{}: {:.6} +- {:.6}", r.seed, r.mean, r.half_width);
        }
        s
    }

    /// `seed\tmean_accuracy\tci95_half_width` plus one row per seed.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seed\tmean_accuracy\tci95_half_width\n");
        for r in &self.per_seed {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.seed, r.mean, r.half_width);
        }
        s
    }
}

/// Evaluates `predictor` on `tasks` episodes for each of `seeds`
/// evaluation seeds. Seed `i` draws its tasks from substream `i` of
/// `base_seed`, so a seed's tasks do not depend on how many seeds run.
pub fn meta_test(
    predictor: &impl Predictor,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    tasks: usize,
    base_seed: u64,
    seeds: u32,
) -> Result<EvalReport> {
    spec.validate()?;
    if seeds == 0 {
        return Err(Error::Parameter(
            "at least one evaluation seed is required".into(),
        ));
    }
    let mut per_seed = Vec::with_capacity(seeds as usize);
    let mut all = Vec::with_capacity(seeds as usize * tasks);
    let mut dropout_ops = 0;
    for seed in 0..seeds {
        let mut episodes = substream(base_seed, Stream::EvalEpisodes, seed);
        let mut shuffle = substream(base_seed, Stream::EvalShuffle, seed);
        let (accs, drops) = run_tasks(predictor, dataset, spec, tasks, &mut episodes, &mut shuffle)?;
        let (mean, half_width) = confidence_interval(&accs)?;
        per_seed.push(SeedResult {
            seed,
            mean,
            half_width,
        });
        dropout_ops += drops;
        all.extend(accs);
    }
    let means: Vec<f64> = per_seed.iter().map(|r| r.mean).collect();
    let widths: Vec<f64> = per_seed.iter().map(|r| r.half_width).collect();
    Ok(EvalReport {
        tasks_per_seed: tasks,
        mean: shifted_mean(&all),
        half_width: shifted_mean(&widths),
        best: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst: means.iter().copied().fold(f64::INFINITY, f64::min),
        average: shifted_mean(&means),
        per_seed,
        dropout_ops,
    })
}

/// Average Euclidean distances to the clean-class centroid, see
/// [`outlier_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierProbe {
    pub episodes: usize,
    /// Mean distance of the model's class representatives.
    pub representative: f64,
    /// Mean distance of the plain class means.
    pub plain_mean: f64,
}

/// Builds `episodes` K-shot support sets from `split` in which every
/// class holds `shots - 1` clean examples plus one example of another
/// class in the episode, at a random stack position. Support images are
/// embedded as one batch (as in training). Per class, the clean centroid
/// is the mean embedding of its clean members; the representative and the
/// plain mean of all `shots` embeddings are compared against it.
///
/// Examples flagged as planted outliers in the dataset are never used.
pub fn outlier_probe(
    model: &FewShotModel,
    dataset: &Dataset,
    split: Split,
    ways: usize,
    shots: usize,
    episodes: usize,
    rng: &mut Rng,
) -> Result<OutlierProbe> {
    if ways < 2 || shots < 2 || episodes == 0 {
        return Err(Error::Parameter(format!(
            "outlier probe needs ways >= 2, shots >= 2 and episodes > 0 (got {ways}, {shots}, {episodes})"
        )));
    }
    let clean: Vec<(usize, Vec<usize>)> = dataset
        .classes_in(split)
        .into_iter()
        .map(|c| {
            let ok = (0..dataset.classes[c].examples.len())
                .filter(|&i| !dataset.classes[c].outliers[i])
                .collect::<Vec<_>>();
            (c, ok)
        })
        .filter(|(_, ok)| ok.len() >= shots)
        .collect();
    if clean.len() < ways {
        return Err(Error::Capacity(format!(
            "{split} split has {} classes with {shots} clean examples, need {ways}",
            clean.len()
        )));
    }
    let (mut rep_total, mut mean_total) = (0.0, 0.0);
    for _ in 0..episodes {
        let chosen = index::sample(rng, clean.len(), ways).into_vec();
        let mut images = Vec::with_capacity(ways * shots);
        let mut planted = Vec::with_capacity(ways);
        for (slot, &ci) in chosen.iter().enumerate() {
            let (class, ok) = &clean[ci];
            let picks = index::sample(rng, ok.len(), shots - 1).into_vec();
            let mut members: Vec<_> = picks
                .iter()
                .map(|&p| dataset.classes[*class].examples[ok[p]].clone())
                .collect();
            let other = chosen[(slot + rng.random_range(1..ways)) % ways];
            let (oc, ook) = &clean[other];
            let intruder = dataset.classes[*oc].examples[ook[rng.random_range(0..ook.len())]].clone();
            let at = rng.random_range(0..shots);
            members.insert(at, intruder);
            planted.push(at);
            images.extend(members);
        }
        let labels: Vec<usize> = (0..ways).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
        let embs = model.embeddings(&Tensor::stack(&images)?, &labels, None)?;
        for (c, class_embs) in embs.chunks_exact(shots).enumerate() {
            let rep = model.aggregate_kshot(class_embs)?.maps;
            let mean_of = |keep: &dyn Fn(usize) -> bool| {
                let rows: Vec<&Tensor> = (0..shots)
                    .filter(|&i| keep(i))
                    .map(|i| &class_embs[i].maps)
                    .collect();
                let mut m = Tensor::zeros(rows[0].shape());
                for r in &rows {
                    m.data_mut().iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
                }
                let n = rows.len() as f64;
                m.data_mut().iter_mut().for_each(|a| *a /= n);
                m
            };
            let centroid = mean_of(&|i| i != planted[c]);
            let plain = mean_of(&|_| true);
            rep_total += euclidean_distance(&rep, &centroid)?;
            mean_total += euclidean_distance(&plain, &centroid)?;
        }
    }
    let n = (episodes * ways) as f64;
    Ok(OutlierProbe {
        episodes,
        representative: rep_total / n,
        plain_mean: mean_total / n,
    })
}
