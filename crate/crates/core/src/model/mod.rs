//! The few-shot learner: a convolutional embedding network, one attention
//! network shared by every channel that turns same-channel feature maps
//! of several examples into aggregation weights, and a Euclidean distance
//! classifier over the aggregated class representatives.
//!
//! The graph-level building blocks live in [`network`]; [`FewShotModel`]
//! wraps them for callers holding plain tensors.

pub mod mask;
pub mod network;
pub mod params;

use rand::Rng;

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph};
use crate::tensor::Tensor;

pub use mask::TaskDropoutMask;
pub use network::{AggregationMode, ForwardOptions};
pub use params::{Architecture, ModelParams, ParamVars};

/// The feature maps `[filters, l, l]` of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub maps: Tensor,
    pub class_id: usize,
    pub example_id: usize,
}

/// Feature maps of one channel gathered across several examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    /// `[m, l, l]`
    pub stack: Tensor,
    /// `(class_id, example_id)` of each stacked map.
    pub ordering: Vec<(usize, usize)>,
}

impl ChannelStack {
    /// Channel `channel` of each embedding, in the given order.
    pub fn gather(embs: &[&Embedding], channel: usize) -> Result<Self> {
        let maps = embs
            .iter()
            .map(|e| e.maps.slice_first(channel))
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelStack {
            stack: Tensor::stack(&maps)?,
            ordering: embs.iter().map(|e| (e.class_id, e.example_id)).collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.stack.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights {
    pub w: Vec<f64>,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRepresentative {
    pub maps: Tensor,
    pub class_id: usize,
    /// Positions (into the embeddings handed to the aggregator) in the
    /// order they were stacked.
    pub stack_order: Vec<usize>,
}

/// Parameters plus forward-pass options.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotModel {
    pub params: ModelParams,
    pub options: ForwardOptions,
}

impl FewShotModel {
    pub fn new(params: ModelParams, options: ForwardOptions) -> Self {
        FewShotModel { params, options }
    }

    pub fn arch(&self) -> &Architecture {
        &self.params.arch
    }

    /// Embeds `images: [n, ch, h, w]` as one normalisation batch.
    pub fn embed(&self, images: &Tensor, mask: Option<&TaskDropoutMask>) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let x = g.constant(images.clone());
        let e = network::embed(&mut g, &pv, self.arch(), x, mask)?;
        Ok(g.value(e).clone())
    }

    /// Like [`FewShotModel::embed`], split into labelled [`Embedding`]s.
    /// Example ids count up within each class in input order.
    pub fn embeddings(
        &self,
        images: &Tensor,
        class_ids: &[usize],
        mask: Option<&TaskDropoutMask>,
    ) -> Result<Vec<Embedding>> {
        let batch = self.embed(images, mask)?;
        if class_ids.len() != batch.shape()[0] {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                class_ids.len(),
                batch.shape()[0]
            )));
        }
        let mut seen = std::collections::HashMap::<usize, usize>::new();
        class_ids
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let n = seen.entry(c).or_insert(0);
                let example_id = *n;
                *n += 1;
                Ok(Embedding {
                    maps: batch.slice_first(i)?,
                    class_id: c,
                    example_id,
                })
            })
            .collect()
    }

    /// Weights for a batch of equally deep stacks, normalised as one batch.
    pub fn attention_weights(
        &self,
        stacks: &[ChannelStack],
        normalize: bool,
    ) -> Result<Vec<AggregationWeights>> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::Contract("no stacks to weight".into()))?;
        let m = first.depth();
        let m_max = self.arch().m_max;
        if m > m_max {
            return Err(Error::Capacity(format!(
                "stack of {m} maps exceeds attention width {m_max}"
            )));
        }
        let map_shape = &first.stack.shape()[1..];
        let map_len: usize = map_shape.iter().product();
        let mut data = vec![0.0; stacks.len() * m_max * map_len];
        for (b, s) in stacks.iter().enumerate() {
            if s.stack.shape() != first.stack.shape() {
                return Err(Error::Shape(format!(
                    "stack {:?} vs {:?}",
                    s.stack.shape(),
                    first.stack.shape()
                )));
            }
            let at = b * m_max * map_len;
            data[at..at + m * map_len].copy_from_slice(s.stack.data());
        }
        let mut shape = vec![stacks.len(), m_max];
        shape.extend_from_slice(map_shape);
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let x = g.constant(Tensor::new(&shape, data)?);
        let w = network::attention_weights(&mut g, &pv, self.arch(), x, m, normalize)?;
        Ok(g.value(w)
            .data()
            .chunks_exact(m)
            .map(|row| AggregationWeights {
                w: row.to_vec(),
                normalized: normalize,
            })
            .collect())
    }

    /// K-shot representative: per channel, the softmax-weighted sum of the
    /// class's maps in the given order.
    pub fn aggregate_kshot(&self, class_embs: &[Embedding]) -> Result<ClassRepresentative> {
        let first = class_embs
            .first()
            .ok_or_else(|| Error::Contract("aggregation over an empty class".into()))?;
        if class_embs.iter().any(|e| e.class_id != first.class_id) {
            return Err(Error::Contract("K-shot aggregation mixes classes".into()));
        }
        let order: Vec<usize> = (0..class_embs.len()).collect();
        let maps = self.aggregate_rows(class_embs, &order, true)?;
        Ok(ClassRepresentative {
            maps,
            class_id: first.class_id,
            stack_order: order,
        })
    }

    /// One-shot representative of `all_embs[target]`: its maps lead every
    /// stack, followed by the other classes in one random order shared by
    /// all channels. Weights are raw unless the model forces softmax.
    pub fn aggregate_oneshot(
        &self,
        all_embs: &[Embedding],
        target: usize,
        rng: &mut impl Rng,
    ) -> Result<ClassRepresentative> {
        if target >= all_embs.len() {
            return Err(Error::Contract(format!("target {target} of {}", all_embs.len())));
        }
        let mut ids: Vec<usize> = all_embs.iter().map(|e| e.class_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(
                "one-shot aggregation needs one embedding per class".into(),
            ));
        }
        let order = network::one_shot_order(target, all_embs.len(), rng);
        let maps = self.aggregate_rows(all_embs, &order, self.options.one_shot_softmax)?;
        Ok(ClassRepresentative {
            maps,
            class_id: all_embs[target].class_id,
            stack_order: order,
        })
    }

    fn aggregate_rows(&self, embs: &[Embedding], order: &[usize], normalize: bool) -> Result<Tensor> {
        let maps: Vec<Tensor> = embs.iter().map(|e| e.maps.clone()).collect();
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let x = g.constant(Tensor::stack(&maps)?);
        let rep = network::aggregate_stacked(&mut g, &pv, self.arch(), x, order, normalize)?;
        Ok(g.value(rep).clone())
    }

    /// Mean query cross-entropy of one episode.
    pub fn episode_loss(
        &self,
        episode: &Episode,
        mask: Option<&TaskDropoutMask>,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let out = network::episode_forward(&mut g, &pv, self.arch(), self.options, episode, mask, rng)?;
        g.value(out.loss).item()
    }

    /// Episode loss and its gradient for every parameter tensor, in
    /// canonical order.
    pub fn loss_and_grads(
        &self,
        episode: &Episode,
        mask: Option<&TaskDropoutMask>,
        rng: &mut impl Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, true);
        let out = network::episode_forward(&mut g, &pv, self.arch(), self.options, episode, mask, rng)?;
        let loss = g.value(out.loss).item()?;
        let grads = g.backward(out.loss)?;
        Ok((loss, pv.vars().into_iter().map(|v| grads.wrt(&g, v)).collect()))
    }

    /// Per-query class probabilities `[queries][ways]` with the full
    /// network (no dropout).
    pub fn query_probabilities(&self, episode: &Episode, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let out = network::episode_forward(&mut g, &pv, self.arch(), self.options, episode, None, rng)?;
        let ways = episode.ways();
        Ok(g.value(out.distances)
            .data()
            .chunks_exact(ways)
            .map(|row| {
                let mut p: Vec<f64> = row.iter().map(|d| -d).collect();
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }
}

/// Euclidean distance between two equally shaped tensors.
pub fn euclidean_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `softmax(-d(query, rep_c))` over the representatives.
pub fn classify(query: &Tensor, reps: &[Tensor]) -> Result<Vec<f64>> {
    let mut logits = reps
        .iter()
        .map(|r| euclidean_distance(query, r).map(|d| -d))
        .collect::<Result<Vec<_>>>()?;
    if logits.is_empty() {
        return Err(Error::Contract(
            "classify needs at least one representative".into(),
        ));
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_classes, synth_dataset, Split, SynthParams};
    use crate::episode::{sample_episode, EpisodeSpec};
    use crate::graph::OpKind;
    use crate::rng::{stream, Stream};
    use crate::testutil::{randn, rng};

    fn tiny(m_max: usize) -> FewShotModel {
        let mut arch = Architecture::standard(1, 24, false, m_max);
        arch.embed_filters = 8;
        arch.attention_filters = 4;
        let params = ModelParams::init(arch, &mut stream(5, Stream::Init)).unwrap();
        FewShotModel::new(params, ForwardOptions::default())
    }

    fn embs(class_ids: &[usize], seed: u32) -> Vec<Embedding> {
        let mut r = rng(seed);
        let mut counts = std::collections::HashMap::new();
        class_ids
            .iter()
            .map(|&c| {
                let n = counts.entry(c).or_insert(0);
                *n += 1;
                Embedding {
                    maps: randn(&[8, 3, 3], &mut r),
                    class_id: c,
                    example_id: *n - 1,
                }
            })
            .collect()
    }

    fn episode(ways: usize, shots: usize, queries: usize, seed: u64) -> Episode {
        let ds = synth_dataset(&SynthParams {
            num_classes: 6,
            per_class: shots + queries,
            image_size: 24,
            noise_sd: 0.1,
            outlier_rate: 0.0,
            seed,
        })
        .unwrap();
        let ds = split_classes(ds, (6, 0, 0), &mut stream(seed, Stream::Split)).unwrap();
        sample_episode(
            &ds,
            &EpisodeSpec::new(ways, shots, queries, Split::Train),
            &mut stream(seed, Stream::TrainEpisodes),
        )
        .unwrap()
    }

    fn stacks_of(e: &[Embedding]) -> Vec<ChannelStack> {
        let refs: Vec<&Embedding> = e.iter().collect();
        (0..8).map(|k| ChannelStack::gather(&refs, k).unwrap()).collect()
    }

    #[test]
    fn mask_identity_when_all_pass() {
        let model = tiny(3);
        let images = randn(&[3, 1, 24, 24], &mut rng(1));
        let plain = model.embed(&images, None).unwrap();
        let masked = model.embed(&images, Some(&TaskDropoutMask::all_pass(8))).unwrap();
        assert_eq!(plain, masked);
        assert_eq!(plain.shape(), &[3, 8, 3, 3]);
    }

    #[test]
    fn single_map_softmax_is_one() {
        let model = tiny(3);
        let w = model.attention_weights(&stacks_of(&embs(&[0], 2)), true).unwrap();
        assert!(w.iter().all(|a| a.w == [1.0] && a.normalized));
    }

    #[test]
    fn zero_fc_gives_uniform_weights() {
        let mut model = tiny(4);
        model.params.zero_attention_fc();
        let w = model
            .attention_weights(&stacks_of(&embs(&[0, 0, 0], 3)), true)
            .unwrap();
        assert!(w.iter().all(|a| a.w == [1.0 / 3.0; 3]));
    }

    #[test]
    fn deep_stack_is_a_capacity_error() {
        let model = tiny(2);
        let err = model.attention_weights(&stacks_of(&embs(&[0, 0, 0], 3)), true);
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn attention_matches_composed_primitives() {
        let model = tiny(4);
        let e = embs(&[0, 1, 2], 4);
        let stacks = stacks_of(&e);
        let got = model.attention_weights(&stacks, false).unwrap();

        // Rebuild the attention network op by op on a fresh graph.
        let p = &model.params;
        let mut padded = Tensor::zeros(&[8, 4, 3, 3]);
        for (k, s) in stacks.iter().enumerate() {
            padded.data_mut()[k * 36..k * 36 + 27].copy_from_slice(s.stack.data());
        }
        let mut g = Graph::new();
        let mut h = g.constant(padded);
        for b in &p.attention {
            let (k, bias, gamma, beta) = (
                g.constant(b.kernel.clone()),
                g.constant(b.bias.clone()),
                g.constant(b.gamma.clone()),
                g.constant(b.beta.clone()),
            );
            h = g.conv2d(h, k, bias).unwrap();
            h = g.batchnorm(h, gamma, beta, 1e-5).unwrap();
            h = g.relu(h).unwrap();
        }
        let flat = g.reshape(h, &[8, 36]).unwrap();
        let (w, b) = (g.constant(p.fc_weight.clone()), g.constant(p.fc_bias.clone()));
        let logits = g.linear(flat, w, b).unwrap();
        let all = g.value(logits).data();
        for (k, a) in got.iter().enumerate() {
            assert!(!a.normalized);
            for j in 0..3 {
                assert!((a.w[j] - all[k * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kshot_examples() {
        let model = tiny(4);
        let one = embs(&[7], 5);
        assert_eq!(model.aggregate_kshot(&one).unwrap().maps, one[0].maps);

        let two = embs(&[3, 3], 6);
        let rep = model.aggregate_kshot(&two).unwrap();
        let w = model.attention_weights(&stacks_of(&two), true).unwrap();
        for k in 0..8 {
            for i in 0..9 {
                let manual =
                    w[k].w[0] * two[0].maps.data()[k * 9 + i] + w[k].w[1] * two[1].maps.data()[k * 9 + i];
                assert!((rep.maps.data()[k * 9 + i] - manual).abs() < 1e-12);
            }
        }

        let mut zeroed = tiny(4);
        zeroed.params.zero_attention_fc();
        let four = embs(&[1, 1, 1, 1], 7);
        let rep = zeroed.aggregate_kshot(&four).unwrap();
        for i in 0..72 {
            let mean = four.iter().map(|e| e.maps.data()[i]).sum::<f64>() / 4.0;
            assert!((rep.maps.data()[i] - mean).abs() < 1e-12);
        }
        assert!(model.aggregate_kshot(&[]).is_err());
        assert!(model.aggregate_kshot(&embs(&[1, 2], 8)).is_err());
    }

    #[test]
    fn oneshot_examples() {
        let all = embs(&[0, 1, 2], 9);
        let mut select = tiny(3);
        select.params.zero_attention_fc();
        select.params.fc_bias.data_mut()[0] = 1.0;
        for target in 0..3 {
            let rep = select.aggregate_oneshot(&all, target, &mut rng(10)).unwrap();
            assert_eq!(rep.maps, all[target].maps);
            assert_eq!(rep.stack_order[0], target);
        }

        let mut zeroed = tiny(3);
        zeroed.params.zero_attention_fc();
        let rep = zeroed.aggregate_oneshot(&all, 1, &mut rng(11)).unwrap();
        assert!(rep.maps.data().iter().all(|&v| v == 0.0));

        let model = tiny(3);
        let rep = model.aggregate_oneshot(&all, 2, &mut rng(12)).unwrap();
        let ordered: Vec<Embedding> = rep.stack_order.iter().map(|&i| all[i].clone()).collect();
        let w = model.attention_weights(&stacks_of(&ordered), false).unwrap();
        for k in 0..8 {
            for i in 0..9 {
                let manual: f64 = (0..3)
                    .map(|j| w[k].w[j] * ordered[j].maps.data()[k * 9 + i])
                    .sum();
                assert!((rep.maps.data()[k * 9 + i] - manual).abs() < 1e-12);
            }
        }
        assert!(model
            .aggregate_oneshot(&embs(&[0, 0, 1], 13), 0, &mut rng(0))
            .is_err());
    }

    #[test]
    fn attention_is_shared_across_channels() {
        let model = tiny(3);
        let stacks = stacks_of(&embs(&[0, 0, 0], 14));
        let before = model.attention_weights(&stacks, true).unwrap();
        let mut nudged = model.clone();
        nudged.params.attention[0].kernel.data_mut()[0] += 0.5;
        let after = nudged.attention_weights(&stacks, true).unwrap();
        assert!(before.iter().zip(&after).all(|(a, b)| a.w != b.w));
    }

    #[test]
    fn distance_examples() {
        let mut r = rng(15);
        let a = randn(&[8, 3, 3], &mut r);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[17] += 3.0;
        assert!((euclidean_distance(&a, &b).unwrap() - 3.0).abs() < 1e-12);
        let c = randn(&[8, 3, 3], &mut r);
        let flat: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((euclidean_distance(&a, &c).unwrap() - flat).abs() < 1e-12);
        assert!(euclidean_distance(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn classify_examples() {
        let q = Tensor::zeros(&[3]);
        let reps: Vec<Tensor> = (1..=3)
            .map(|d| Tensor::new(&[3], vec![d as f64, 0.0, 0.0]).unwrap())
            .collect();
        let p = classify(&q, &reps).unwrap();
        let z: f64 = [-1.0f64, -2.0, -3.0].iter().map(|v| v.exp()).sum();
        for (i, pi) in p.iter().enumerate() {
            assert!((pi - (-(i as f64 + 1.0)).exp() / z).abs() < 1e-15);
        }
        let same = vec![Tensor::full(&[3], 1.0); 4];
        assert!(classify(&q, &same)
            .unwrap()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn uniform_predictor_loss_is_log_ways() {
        let mut model = tiny(5);
        for b in &mut model.params.embedder {
            b.kernel.data_mut().fill(0.0);
        }
        let ep = episode(5, 1, 2, 1);
        let loss = model.episode_loss(&ep, None, &mut rng(0)).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_matches_composed_pipeline() {
        let model = tiny(2);
        let ep = episode(2, 2, 3, 2);
        let loss = model.episode_loss(&ep, None, &mut rng(0)).unwrap();

        let support = model.embeddings(&ep.support, &ep.support_labels, None).unwrap();
        let query = model.embed(&ep.query, None).unwrap();
        let reps: Vec<Tensor> = (0..2)
            .map(|c| {
                let class: Vec<Embedding> = support.iter().filter(|e| e.class_id == c).cloned().collect();
                model.aggregate_kshot(&class).unwrap().maps
            })
            .collect();
        let mut nll = 0.0;
        for (i, &y) in ep.query_labels.iter().enumerate() {
            let p = classify(&query.slice_first(i).unwrap(), &reps).unwrap();
            nll -= p[y].ln();
        }
        let manual = nll / ep.query_labels.len() as f64;
        assert!((loss - manual).abs() < 1e-12, "{loss} vs {manual}");
    }

    #[test]
    fn support_and_query_share_the_mask() {
        let model = tiny(3);
        let ep = episode(3, 1, 2, 3);
        let mask = TaskDropoutMask::sample(&mut rng(16), 0.5, 8).unwrap();
        let mut g = Graph::new();
        let pv = model.params.register(&mut g, true);
        network::episode_forward(
            &mut g,
            &pv,
            model.arch(),
            model.options,
            &ep,
            Some(&mask),
            &mut rng(0),
        )
        .unwrap();
        let used = g.dropout_masks();
        assert_eq!(used.len(), 4);
        assert_eq!(used[0], used[2]);
        assert_eq!(used[1], used[3]);
        assert_eq!(used[0], mask.masks[0].as_slice());
        assert_eq!(used[1], mask.masks[1].as_slice());

        let mut g = Graph::new();
        let pv = model.params.register(&mut g, false);
        network::episode_forward(&mut g, &pv, model.arch(), model.options, &ep, None, &mut rng(0)).unwrap();
        assert_eq!(g.count(OpKind::Dropout), 0);
    }

    #[test]
    fn probabilities_are_normalised() {
        let model = tiny(3);
        let ep = episode(3, 1, 4, 4);
        for row in model.query_probabilities(&ep, &mut rng(0)).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn kshot_weights_are_a_distribution(k in 1usize..5, seed in 0u32..1000) {
                let model = tiny(4);
                let w = model.attention_weights(&stacks_of(&embs(&vec![0; k], seed)), true).unwrap();
                for a in &w {
                    prop_assert!(a.w.iter().all(|&v| v > 0.0));
                    prop_assert!((a.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }

            #[test]
            fn classify_is_shift_invariant(d in proptest::collection::vec(0.0f64..20.0, 2..8), shift in -50.0f64..50.0) {
                let mut p: Vec<f64> = d.iter().map(|v| -v).collect();
                let mut q: Vec<f64> = d.iter().map(|v| -v - shift).collect();
                softmax_in_place(&mut p);
                softmax_in_place(&mut q);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
