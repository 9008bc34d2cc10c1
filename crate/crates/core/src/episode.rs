//! Episode specification and sampling.

use rand::seq::index;
use rand::Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of a C-way K-shot task drawn from one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub split: Split,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize, split: Split) -> Self {
        EpisodeSpec {
            ways,
            shots,
            queries,
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::Parameter(format!("ways = {} (need >= 2)", self.ways)));
        }
        if self.shots < 1 || self.queries < 1 {
            return Err(Error::Parameter(format!(
                "shots = {}, queries = {} (need >= 1)",
                self.shots, self.queries
            )));
        }
        Ok(())
    }

    pub fn with_split(self, split: Split) -> Self {
        EpisodeSpec { split, ..self }
    }

    /// Depth of the attention stacks this task family produces.
    pub fn stack_depth(&self) -> usize {
        if self.shots == 1 {
            self.ways
        } else {
            self.shots
        }
    }
}

/// A sampled task. Support and query rows are class-major: rows of
/// episode label `c` are contiguous and labels run `0..ways`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// `[ways * shots, ch, h, w]`
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `[ways * queries, ch, h, w]`
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Dataset class index behind each episode label.
    pub classes: Vec<usize>,
    /// `(dataset class, example index)` of every support row.
    pub support_examples: Vec<(usize, usize)>,
    pub query_examples: Vec<(usize, usize)>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.spec.ways
    }

    pub fn shots(&self) -> usize {
        self.spec.shots
    }

    /// Support rows of episode label `c`.
    pub fn support_rows(&self, c: usize) -> Vec<usize> {
        (c * self.spec.shots..(c + 1) * self.spec.shots).collect()
    }
}

/// Draws `ways` classes of `spec.split` without replacement, then
/// `shots + queries` distinct examples of each, the first `shots` of which
/// form the support set.
pub fn sample_episode(dataset: &Dataset, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    let per_class = spec.shots + spec.queries;
    let in_split = dataset.classes_in(spec.split);
    let eligible: Vec<usize> = in_split
        .iter()
        .copied()
        .filter(|&c| dataset.classes[c].examples.len() >= per_class)
        .collect();
    if eligible.len() < spec.ways {
        return Err(Error::Capacity(format!(
            "{:?} split has {} classes with >= {per_class} examples ({} classes total) but {}-way episodes need {} (short by {})",
            spec.split,
            eligible.len(),
            in_split.len(),
            spec.ways,
            spec.ways,
            spec.ways - eligible.len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, eligible.len(), spec.ways)
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries);
    let mut support_examples = Vec::with_capacity(support.capacity());
    let mut query_examples = Vec::with_capacity(query.capacity());
    for &class in &chosen {
        let examples = &dataset.classes[class].examples;
        let picks = index::sample(rng, examples.len(), per_class).into_vec();
        for (i, &e) in picks.iter().enumerate() {
            if i < spec.shots {
                support.push(examples[e].clone());
                support_examples.push((class, e));
            } else {
                query.push(examples[e].clone());
                query_examples.push((class, e));
            }
        }
    }
    Ok(Episode {
        spec: *spec,
        support: Tensor::stack(&support)?,
        support_labels: (0..spec.ways)
            .flat_map(|c| std::iter::repeat_n(c, spec.shots))
            .collect(),
        query: Tensor::stack(&query)?,
        query_labels: (0..spec.ways)
            .flat_map(|c| std::iter::repeat_n(c, spec.queries))
            .collect(),
        classes: chosen,
        support_examples,
        query_examples,
    })
}
