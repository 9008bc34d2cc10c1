//! Meta-trains a 5-way 1-shot model on the synthetic bars-and-blobs data
//! and saves it.
//!
//! `cargo run --release --example train_synthetic -- [episodes] [checkpoint]`

use std::path::PathBuf;

use fewshot::checkpoint::save_checkpoint;
use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::EpisodeSpec;
use fewshot::model::{Architecture, FewShotModel, ForwardOptions, ModelParams};
use fewshot::rng::{stream, Stream};
use fewshot::train::{meta_train_observed, TrainConfig};

fn main() -> fewshot::Result<()> {
    let episodes = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(500);
    let out = std::env::args()
        .nth(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| "synthetic.bin".into());

    let raw = synth_dataset(&SynthParams {
        num_classes: 30,
        per_class: 20,
        image_size: 28,
        noise_sd: 0.1,
        outlier_rate: 0.0,
        seed: 0,
    })?;
    let ds = split_classes(raw, (20, 5, 5), &mut stream(0, Stream::Split))?;
    let params = ModelParams::init(
        Architecture::standard(1, 28, false, 5),
        &mut stream(0, Stream::Init),
    )?;
    let model = FewShotModel::new(params, ForwardOptions::default());

    let mut cfg = TrainConfig::new(EpisodeSpec::new(5, 1, 5, Split::Train), episodes, 0);
    cfg.val_every = 100;
    cfg.val_tasks = 50;
    let outcome = meta_train_observed(model, &ds, &cfg, |row| {
        if let Some(acc) = row.val_accuracy {
            println!(
                "episode {:>5}  loss {:.4}  validation {:.3}",
                row.episode, row.train_loss, acc
            );
        }
    })?;
    save_checkpoint(&out, &outcome.best, None)?;
    println!("saved the best validation model to {}", out.display());
    Ok(())
}
