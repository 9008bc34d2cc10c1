//! Model checkpoints and dataset caches on top of [`Container`].
//!
//! A checkpoint header carries `kind=checkpoint`, the architecture fields
//! (`in_channels`, `image_size`, `embed_filters`, `attention_filters`,
//! `last_pool`, `m_max`), the forward options (`mode`,
//! `one_shot_softmax`) and `adam_t`. Arrays are the parameters under
//! their canonical names (`embed.0.kernel`, ..., `attn.fc.bias`),
//! followed by `adam.m.<name>` and `adam.v.<name>` when optimizer state
//! is saved.
//!
//! A dataset cache has `kind=dataset`, the example shape, the provenance
//! and per class `class.<i>.name` / `class.<i>.split`; its arrays are
//! `class.<i>.examples` (`[n, ch, h, w]`) and `class.<i>.outliers`
//! (`[n]`, 0 or 1).

use std::path::Path;

use crate::container::Container;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{AggregationMode, Architecture, FewShotModel, ForwardOptions, ModelParams};
use crate::optim::AdamState;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub fn mode_name(mode: AggregationMode) -> &'static str {
    match mode {
        AggregationMode::Attention => "l2ae",
        AggregationMode::Mean => "mean-baseline",
    }
}

pub fn parse_mode(s: &str) -> Option<AggregationMode> {
    match s {
        "l2ae" => Some(AggregationMode::Attention),
        "mean-baseline" => Some(AggregationMode::Mean),
        _ => None,
    }
}

fn write_arch(c: &mut Container, a: &Architecture) {
    c.set("in_channels", a.in_channels);
    c.set("image_size", a.image_size);
    c.set("embed_filters", a.embed_filters);
    c.set("attention_filters", a.attention_filters);
    c.set("last_pool", a.last_pool);
    c.set("m_max", a.m_max);
}

fn read_arch(c: &Container) -> Result<Architecture> {
    let arch = Architecture {
        in_channels: c.parse("in_channels")?,
        image_size: c.parse("image_size")?,
        embed_filters: c.parse("embed_filters")?,
        attention_filters: c.parse("attention_filters")?,
        last_pool: c.parse("last_pool")?,
        m_max: c.parse("m_max")?,
    };
    arch.validate()
        .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    Ok(arch)
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    match c.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Format(format!(
            "expected a {kind} file, found kind {other:?}"
        ))),
    }
}

pub fn checkpoint_container(model: &FewShotModel, adam: Option<&AdamState>) -> Container {
    let mut c = Container::new();
    c.set("kind", "checkpoint");
    write_arch(&mut c, model.arch());
    c.set("mode", mode_name(model.options.mode));
    c.set("one_shot_softmax", model.options.one_shot_softmax);
    c.set("adam_t", adam.map_or(0, |a| a.t));
    let named = model.params.named_tensors();
    for (name, t) in &named {
        c.push_array(name.clone(), (*t).clone());
    }
    if let Some(adam) = adam {
        for ((name, _), (m, v)) in named.iter().zip(adam.m.iter().zip(&adam.v)) {
            c.push_array(format!("adam.m.{name}"), m.clone());
            c.push_array(format!("adam.v.{name}"), v.clone());
        }
    }
    c
}

pub fn save_checkpoint(path: &Path, model: &FewShotModel, adam: Option<&AdamState>) -> Result<()> {
    checkpoint_container(model, adam).write(path)
}

fn take_array(c: &Container, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = c.array(name)?;
    if t.shape() != like.shape() {
        return Err(Error::Format(format!(
            "array {name:?} has shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.clone())
}

/// Model and, when present, optimizer state.
pub fn checkpoint_from_container(c: &Container) -> Result<(FewShotModel, Option<AdamState>)> {
    expect_kind(c, "checkpoint")?;
    let arch = read_arch(c)?;
    let mode = c.get("mode").unwrap_or("l2ae");
    let options = ForwardOptions {
        mode: parse_mode(mode).ok_or_else(|| Error::Format(format!("unknown mode {mode:?}")))?,
        one_shot_softmax: c.parse("one_shot_softmax")?,
    };
    // Shapes come from a fresh initialisation; every value is overwritten.
    let mut params = ModelParams::init(arch, &mut stream(0, Stream::Init))?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        *slot = take_array(c, name, slot)?;
    }
    let adam = if c.array(&format!("adam.m.{}", names[0])).is_ok() {
        let mut state = AdamState::new(params.tensors());
        for (i, name) in names.iter().enumerate() {
            state.m[i] = take_array(c, &format!("adam.m.{name}"), &state.m[i])?;
            state.v[i] = take_array(c, &format!("adam.v.{name}"), &state.v[i])?;
        }
        state.t = c.parse("adam_t")?;
        Some(state)
    } else {
        None
    };
    Ok((FewShotModel::new(params, options), adam))
}

pub fn load_checkpoint(path: &Path) -> Result<(FewShotModel, Option<AdamState>)> {
    checkpoint_from_container(&Container::read(path)?)
}

pub fn dataset_container(ds: &Dataset) -> Result<Container> {
    let mut c = Container::new();
    c.set("kind", "dataset");
    c.set("channels", ds.channels);
    c.set("height", ds.height);
    c.set("width", ds.width);
    c.set("provenance", ds.provenance.replace('\n', " "));
    c.set("classes", ds.num_classes());
    for (i, class) in ds.classes.iter().enumerate() {
        c.set(format!("class.{i}.name"), &class.name);
        c.set(format!("class.{i}.split"), class.split);
        let mut data = Vec::with_capacity(class.examples.len() * class.examples[0].numel());
        for e in &class.examples {
            data.extend_from_slice(e.data());
        }
        let [ch, h, w] = ds.example_shape();
        c.push_array(
            format!("class.{i}.examples"),
            Tensor::new(&[class.examples.len(), ch, h, w], data)?,
        );
        let flags = class.outliers.iter().map(|&o| o as u8 as f64).collect();
        c.push_array(
            format!("class.{i}.outliers"),
            Tensor::new(&[class.outliers.len()], flags)?,
        );
    }
    Ok(c)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    dataset_container(ds)?.write(path)
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    expect_kind(c, "dataset")?;
    let mut ds = Dataset::new(
        c.parse("channels")?,
        c.parse("height")?,
        c.parse("width")?,
        c.get("provenance").unwrap_or_default(),
    );
    let count: usize = c.parse("classes")?;
    for i in 0..count {
        let name: String = c.parse(&format!("class.{i}.name"))?;
        let split: Split = c.parse(&format!("class.{i}.split"))?;
        let examples = c.array(&format!("class.{i}.examples"))?;
        let n = examples.shape()[0];
        let examples = (0..n)
            .map(|j| examples.slice_first(j))
            .collect::<Result<Vec<_>>>()?;
        let flags = c
            .array(&format!("class.{i}.outliers"))?
            .data()
            .iter()
            .map(|&v| v != 0.0)
            .collect();
        ds.push_class(name, examples, flags)
            .map_err(|e| Error::Format(format!("dataset cache class {i}: {e}")))?;
        ds.classes[i].split = split;
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_container(&Container::read(path)?)
}
