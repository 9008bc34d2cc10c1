//! Trains 5-shot attention aggregation on data with planted outliers and
//! checks how far representatives drift from the clean-class centroid
//! compared with plain means.
//!
//! `cargo run --release --example outlier_robustness -- [episodes] [probe_episodes]`

use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::EpisodeSpec;
use fewshot::eval::outlier_probe;
use fewshot::model::{Architecture, FewShotModel, ForwardOptions, ModelParams};
use fewshot::rng::{stream, Stream};
use fewshot::train::{meta_train, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args()
        .nth(i)
        .and_then(|a| a.parse().ok())
        .unwrap_or(default)
}

fn main() -> fewshot::Result<()> {
    let (episodes, probes) = (arg(1, 2000), arg(2, 100));
    let raw = synth_dataset(&SynthParams {
        num_classes: 30,
        per_class: 20,
        image_size: 28,
        noise_sd: 0.1,
        outlier_rate: 0.2,
        seed: 3,
    })?;
    let ds = split_classes(raw, (20, 5, 5), &mut stream(3, Stream::Split))?;
    let spec = EpisodeSpec::new(5, 5, 5, Split::Train);
    let params = ModelParams::init(
        Architecture::standard(1, 28, false, 5),
        &mut stream(3, Stream::Init),
    )?;
    let untrained = FewShotModel::new(params, ForwardOptions::default());

    let mut cfg = TrainConfig::new(spec, episodes, 3);
    cfg.val_tasks = 0;
    let trained = meta_train(untrained.clone(), &ds, &cfg)?.model;

    for (name, model) in [("untrained", &untrained), ("trained", &trained)] {
        let probe = outlier_probe(
            model,
            &ds,
            Split::Test,
            5,
            5,
            probes,
            &mut stream(3, Stream::Dump),
        )?;
        println!(
            "{name}: representative {:.4}, plain mean {:.4}",
            probe.representative, probe.plain_mean
        );
    }
    Ok(())
}
