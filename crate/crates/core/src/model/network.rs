//! Graph-level forward pass: embedding network, attention network,
//! aggregation strategies and the episode loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

use super::mask::TaskDropoutMask;
use super::params::{Architecture, ParamVars, BN_EPS};

/// How support embeddings of a class become its representative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    /// Learned channel-wise attention weights.
    Attention,
    /// Plain class mean of the support embeddings.
    Mean,
}

/// Embeds a batch `[n, ch, h, w]` into `[n, filters, l, l]`.
///
/// The batch is one normalisation batch. When `mask` is given, the blocks
/// it covers apply channel dropout after the nonlinearity and before
/// pooling.
pub fn embed(
    g: &mut Graph,
    pv: &ParamVars,
    arch: &Architecture,
    images: Var,
    mask: Option<&TaskDropoutMask>,
) -> Result<Var> {
    let shape = g.shape(images);
    if shape.len() != 4 || shape[1] != arch.in_channels {
        return Err(Error::Shape(format!(
            "embed expects [n, {}, h, w], got {shape:?}",
            arch.in_channels
        )));
    }
    let mut h = images;
    let last = pv.embedder.len() - 1;
    for (i, block) in pv.embedder.iter().enumerate() {
        h = g.conv2d(h, block.kernel, block.bias)?;
        h = g.batchnorm(h, block.gamma, block.beta, BN_EPS)?;
        h = g.relu(h)?;
        if let Some(m) = mask.and_then(|m| m.for_block(i).map(|v| (v, m.keep))) {
            h = g.dropout(h, m.0, m.1)?;
        }
        if i < last || arch.last_pool {
            h = g.maxpool2(h)?;
        }
    }
    Ok(h)
}

/// Attention weights for a batch of channel stacks.
///
/// `stacks: [b, m_max, l, l]` (zero padded beyond depth `m`). The whole
/// batch is one normalisation batch. Returns `[b, m]`: raw output-layer
/// values, or their softmax when `normalize` is set.
pub fn attention_weights(
    g: &mut Graph,
    pv: &ParamVars,
    arch: &Architecture,
    stacks: Var,
    m: usize,
    normalize: bool,
) -> Result<Var> {
    if m == 0 || m > arch.m_max {
        return Err(Error::Capacity(format!(
            "stack of {m} maps exceeds attention width {}",
            arch.m_max
        )));
    }
    let mut h = stacks;
    for block in &pv.attention {
        h = g.conv2d(h, block.kernel, block.bias)?;
        h = g.batchnorm(h, block.gamma, block.beta, BN_EPS)?;
        h = g.relu(h)?;
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1..].iter().product()])?;
    let logits = g.linear(flat, pv.fc_weight, pv.fc_bias)?;
    let logits = g.take_cols(logits, m)?;
    if normalize {
        g.softmax(logits)
    } else {
        Ok(logits)
    }
}

/// Representative `[filters, l, l]` from the embeddings at `rows` of
/// `emb: [n, filters, l, l]`, weighted per channel by the attention
/// network. The stack order is `rows` order.
pub fn aggregate_stacked(
    g: &mut Graph,
    pv: &ParamVars,
    arch: &Architecture,
    emb: Var,
    rows: &[usize],
    normalize: bool,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Contract("aggregation over an empty class".into()));
    }
    if rows.len() > arch.m_max {
        return Err(Error::Capacity(format!(
            "stack of {} maps exceeds attention width {}",
            rows.len(),
            arch.m_max
        )));
    }
    let stacks = g.channel_stacks(emb, rows, arch.m_max)?;
    let weights = attention_weights(g, pv, arch, stacks, rows.len(), normalize)?;
    g.weighted_sum(weights, stacks)
}

/// Class mean of the embeddings at `rows`, as a uniform weighted sum.
pub fn aggregate_mean(g: &mut Graph, emb: Var, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::Contract("aggregation over an empty class".into()));
    }
    let channels = g.shape(emb)[1];
    let stacks = g.channel_stacks(emb, rows, rows.len())?;
    let uniform = crate::tensor::Tensor::full(&[channels, rows.len()], 1.0 / rows.len() as f64);
    let weights = g.constant(uniform);
    g.weighted_sum(weights, stacks)
}

/// One-shot stack order for `target`: the target first, the other
/// classes after it in a random order.
pub fn one_shot_order(target: usize, ways: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut others: Vec<usize> = (0..ways).filter(|&c| c != target).collect();
    others.shuffle(rng);
    std::iter::once(target).chain(others).collect()
}

/// Options that change the forward pass but are not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: AggregationMode,
    /// Apply softmax to one-shot weights as well (ablation).
    pub one_shot_softmax: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: AggregationMode::Attention,
            one_shot_softmax: false,
        }
    }
}

/// Everything the forward pass of one episode produced.
pub struct EpisodeForward {
    pub loss: Var,
    /// `[queries, ways]` Euclidean distances.
    pub distances: Var,
    pub support_embeddings: Var,
    pub query_embeddings: Var,
    /// One `[filters, l, l]` representative per episode label.
    pub representatives: Vec<Var>,
    /// Support row order fed to the attention stack of each class.
    pub stack_orders: Vec<Vec<usize>>,
}

/// Class representatives for every label of `episode`.
pub fn representatives(
    g: &mut Graph,
    pv: &ParamVars,
    arch: &Architecture,
    opts: ForwardOptions,
    episode: &Episode,
    support_emb: Var,
    rng: &mut impl Rng,
) -> Result<(Vec<Var>, Vec<Vec<usize>>)> {
    let ways = episode.ways();
    let mut reps = Vec::with_capacity(ways);
    let mut orders = Vec::with_capacity(ways);
    for c in 0..ways {
        let (rep, order) = match (opts.mode, episode.shots()) {
            (AggregationMode::Mean, _) => {
                let rows = episode.support_rows(c);
                (aggregate_mean(g, support_emb, &rows)?, rows)
            }
            (AggregationMode::Attention, 1) => {
                // one support row per class, row index == label
                let order = one_shot_order(c, ways, rng);
                let rep = aggregate_stacked(g, pv, arch, support_emb, &order, opts.one_shot_softmax)?;
                (rep, order)
            }
            (AggregationMode::Attention, _) => {
                let rows = episode.support_rows(c);
                (aggregate_stacked(g, pv, arch, support_emb, &rows, true)?, rows)
            }
        };
        reps.push(rep);
        orders.push(order);
    }
    Ok((reps, orders))
}

/// Query-to-representative distances `[queries, ways]`.
pub fn distances(g: &mut Graph, query_emb: Var, reps: &[Var]) -> Result<Var> {
    let qs = g.shape(query_emb).to_vec();
    let d: usize = qs[1..].iter().product();
    let q = g.reshape(query_emb, &[qs[0], d])?;
    let stacked = g.stack(reps)?;
    let r = g.reshape(stacked, &[reps.len(), d])?;
    g.pairwise_distance(q, r)
}

/// Full forward pass of one episode ending in the mean query
/// cross-entropy of `softmax(-distance)`.
///
/// Support and query images are embedded as two separate normalisation
/// batches under the same `mask`.
pub fn episode_forward(
    g: &mut Graph,
    pv: &ParamVars,
    arch: &Architecture,
    opts: ForwardOptions,
    episode: &Episode,
    mask: Option<&TaskDropoutMask>,
    rng: &mut impl Rng,
) -> Result<EpisodeForward> {
    let support = g.constant(episode.support.clone());
    let query = g.constant(episode.query.clone());
    let support_embeddings = embed(g, pv, arch, support, mask)?;
    let query_embeddings = embed(g, pv, arch, query, mask)?;
    let (representatives, stack_orders) =
        representatives(g, pv, arch, opts, episode, support_embeddings, rng)?;
    let distances = distances(g, query_embeddings, &representatives)?;
    let logits = g.neg(distances)?;
    let loss = g.cross_entropy(logits, &episode.query_labels)?;
    Ok(EpisodeForward {
        loss,
        distances,
        support_embeddings,
        query_embeddings,
        representatives,
        stack_orders,
    })
}
