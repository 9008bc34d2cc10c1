//! Writes the embeddings of one 5-way 5-shot test episode as TSV, the
//! same layout as the `dump-embeddings` command, ready for an external
//! t-SNE or PCA plot.
//!
//! `cargo run --release --example dump_embeddings -- [out.tsv]`

use std::fmt::Write as _;

use fewshot::data::{split_classes, synth_dataset, Split, SynthParams};
use fewshot::episode::{sample_episode, EpisodeSpec};
use fewshot::model::{Architecture, FewShotModel, ForwardOptions, ModelParams};
use fewshot::rng::{stream, Stream};

fn main() -> fewshot::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "embeddings.tsv".into());
    let raw = synth_dataset(&SynthParams {
        num_classes: 10,
        per_class: 10,
        image_size: 28,
        noise_sd: 0.1,
        outlier_rate: 0.0,
        seed: 4,
    })?;
    let ds = split_classes(raw, (5, 0, 5), &mut stream(4, Stream::Split))?;
    let model = FewShotModel::new(
        ModelParams::init(
            Architecture::standard(1, 28, false, 5),
            &mut stream(4, Stream::Init),
        )?,
        ForwardOptions::default(),
    );
    let ep = sample_episode(
        &ds,
        &EpisodeSpec::new(5, 5, 3, Split::Test),
        &mut stream(4, Stream::Dump),
    )?;
    let support = model.embeddings(&ep.support, &ep.support_labels, None)?;
    let query = model.embeddings(&ep.query, &ep.query_labels, None)?;

    let mut text = String::new();
    let row = |text: &mut String, kind: &str, label: usize, values: &[f64]| {
        let _ = write!(text, "{kind}\t{}", ep.classes[label]);
        for v in values {
            let _ = write!(text, "\t{v}");
        }
        text.push('\n');
    };
    for e in support.iter() {
        row(&mut text, "support", e.class_id, e.maps.data());
    }
    for e in query.iter() {
        row(&mut text, "query", e.class_id, e.maps.data());
    }
    for class in support.chunks_exact(5) {
        let rep = model.aggregate_kshot(class)?;
        row(&mut text, "aggregated", rep.class_id, rep.maps.data());
    }
    let dim = support[0].maps.numel();
    let mut header = String::from("kind\tclass");
    for i in 0..dim {
        let _ = write!(header, "\tv{i}");
    }
    std::fs::write(&out, format!("{header}\n{text}")).map_err(|e| fewshot::Error::Io {
        path: out.clone().into(),
        source: e,
    })?;
    println!("wrote {} rows of {dim} values to {out}", text.lines().count());
    Ok(())
}
