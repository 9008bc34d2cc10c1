//! With the attention head's output layer zeroed, K-shot aggregation is
//! the plain class mean: both modes give the same evaluation report.
//!
//! `cargo run --release --example protonets_baseline`

use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::EpisodeSpec;
use fewshot::eval::meta_test;
use fewshot::model::{AggregationMode, Architecture, FewShotModel, ForwardOptions, ModelParams};
use fewshot::rng::{stream, Stream};

fn main() -> fewshot::Result<()> {
    let raw = synth_dataset(&SynthParams {
        num_classes: 12,
        per_class: 12,
        image_size: 28,
        noise_sd: 0.1,
        outlier_rate: 0.0,
        seed: 1,
    })?;
    let ds = split_classes(raw, (6, 0, 6), &mut stream(1, Stream::Split))?;
    let mut params = ModelParams::init(
        Architecture::standard(1, 28, false, 5),
        &mut stream(1, Stream::Init),
    )?;
    params.zero_attention_fc();
    let attention = FewShotModel::new(params, ForwardOptions::default());
    let mut mean = attention.clone();
    mean.options.mode = AggregationMode::Mean;

    let spec = EpisodeSpec::new(5, 5, 5, Split::Test);
    let a = meta_test(&attention, &ds, &spec, 20, 0, 2)?;
    let b = meta_test(&mean, &ds, &spec, 20, 0, 2)?;
    println!("zeroed attention: {:.4} +- {:.4}", a.mean, a.half_width);
    println!("class means:      {:.4} +- {:.4}", b.mean, b.half_width);
    println!("identical reports: {}", a == b);
    Ok(())
}
