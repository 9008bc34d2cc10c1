//! Multi-seed evaluation with 95% confidence intervals. Uses a checkpoint
//! from `train_synthetic` when given, an untrained model otherwise.
//!
//! `cargo run --release --example evaluate_seeds -- [checkpoint]`

use fewshot::checkpoint::load_checkpoint;
use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::EpisodeSpec;
use fewshot::eval::meta_test;
use fewshot::model::{Architecture, FewShotModel, ForwardOptions, ModelParams};
use fewshot::rng::{stream, Stream};

fn main() -> fewshot::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?.0,
        None => FewShotModel::new(
            ModelParams::init(
                Architecture::standard(1, 28, false, 5),
                &mut stream(0, Stream::Init),
            )?,
            ForwardOptions::default(),
        ),
    };
    let raw = synth_dataset(&SynthParams {
        num_classes: 30,
        per_class: 20,
        image_size: 28,
        noise_sd: 0.1,
        outlier_rate: 0.0,
        seed: 0,
    })?;
    let ds = split_classes(raw, (20, 5, 5), &mut stream(0, Stream::Split))?;
    let report = meta_test(&model, &ds, &EpisodeSpec::new(5, 1, 15, Split::Test), 60, 0, 10)?;
    print!("{}", report.to_text());
    Ok(())
}
