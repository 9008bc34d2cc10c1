//! Trains with and without meta-level dropout on outlier-planted
//! synthetic data and compares test accuracy on identical tasks.
//!
//! `cargo run --release --example dropout_ablation -- [episodes] [seeds] [tasks]`

use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::EpisodeSpec;
use fewshot::eval::meta_test;
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
    let (episodes, seeds, tasks) = (arg(1, 400), arg(2, 5) as u64, arg(3, 300));
    let raw = synth_dataset(&SynthParams {
        num_classes: 30,
        per_class: 20,
        image_size: 28,
        noise_sd: 0.1,
        outlier_rate: 0.15,
        seed: 0,
    })?;
    let ds = split_classes(raw, (20, 5, 5), &mut stream(0, Stream::Split))?;
    let spec = EpisodeSpec::new(5, 1, 5, Split::Train);

    let mut totals = [0.0; 2];
    for seed in 0..seeds {
        for (slot, keep) in [0.5, 1.0].into_iter().enumerate() {
            let arch = Architecture::standard(1, 28, false, 5);
            let params = ModelParams::init(arch, &mut stream(seed, Stream::Init))?;
            let model = FewShotModel::new(params, ForwardOptions::default());
            let mut cfg = TrainConfig::new(spec, episodes, seed);
            cfg.keep = keep;
            cfg.val_tasks = 0;
            let trained = meta_train(model, &ds, &cfg)?.model;
            let report = meta_test(&trained, &ds, &spec.with_split(Split::Test), tasks, 1000, 1)?;
            println!("seed {seed} keep {keep}: {:.4}", report.mean);
            totals[slot] += report.mean;
        }
    }
    let n = seeds as f64;
    println!("mean keep 0.5: {:.4}", totals[0] / n);
    println!("mean keep 1.0: {:.4}", totals[1] / n);
    Ok(())
}
