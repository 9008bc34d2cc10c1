//! Compares reverse-mode gradients of a small episode loss with central
//! differences, one parameter tensor at a time. Coordinates whose ±h step
//! flips a ReLU or max-pool branch are skipped and counted.
//!
//! `cargo run --release --example gradient_check`

use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::{sample_episode, EpisodeSpec};
use fewshot::graph::Graph;
use fewshot::model::{network, Architecture, FewShotModel, ForwardOptions, ModelParams};
use fewshot::rng::{stream, Stream};

fn main() -> fewshot::Result<()> {
    let raw = synth_dataset(&SynthParams {
        num_classes: 3,
        per_class: 4,
        image_size: 24,
        noise_sd: 0.1,
        outlier_rate: 0.0,
        seed: 2,
    })?;
    let ds = split_classes(raw, (3, 0, 0), &mut stream(2, Stream::Split))?;
    let ep = sample_episode(
        &ds,
        &EpisodeSpec::new(2, 2, 2, Split::Train),
        &mut stream(2, Stream::TrainEpisodes),
    )?;
    let mut arch = Architecture::standard(1, 24, false, 2);
    arch.embed_filters = 4;
    arch.attention_filters = 2;
    let model = FewShotModel::new(
        ModelParams::init(arch, &mut stream(2, Stream::Init))?,
        ForwardOptions::default(),
    );

    let rng = stream(2, Stream::TrainShuffle);
    let (loss, grads) = model.loss_and_grads(&ep, None, &mut rng.clone())?;
    println!("loss {loss:.6}");
    let forward = |m: &FewShotModel| -> fewshot::Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let pv = m.params.register(&mut g, false);
        let out = network::episode_forward(&mut g, &pv, m.arch(), m.options, &ep, None, &mut rng.clone())?;
        Ok((g.value(out.loss).item()?, g.branch_pattern()))
    };
    let (_, base) = forward(&model)?;
    let h = 1e-4;
    let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (i, (name, grad)) in names.iter().zip(&grads).enumerate() {
        let (mut worst, mut skipped) = (0.0f64, 0);
        for j in 0..grad.numel() {
            let mut plus = model.clone();
            plus.params.tensors_mut()[i].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params.tensors_mut()[i].data_mut()[j] -= h;
            let ((lp, pp), (lm, pm)) = (forward(&plus)?, forward(&minus)?);
            if pp != base || pm != base {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!(
            "{name:<18} {:>4} values  {skipped:>2} skipped  max rel err {worst:.2e}",
            grad.numel()
        );
    }
    Ok(())
}
