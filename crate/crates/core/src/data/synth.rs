//! Procedural dataset of oriented bars and Gaussian blobs.
//!
//! Each class owns one pattern: an oriented bar or a Gaussian blob at a
//! class-specific position and angle. Examples add per-pixel Gaussian
//! noise and are clamped to `[0, 1]`. With probability `outlier_rate` an
//! example is drawn from the pattern of a uniformly chosen *other* class
//! instead; such examples are flagged in [`ClassEntry::outliers`].
//!
//! [`ClassEntry::outliers`]: super::ClassEntry::outliers

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

use super::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise_sd: f64,
    pub outlier_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Bar { half_len: f64, half_width: f64 },
    Blob { sigma: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Pattern {
    shape: Shape,
    cx: f64,
    cy: f64,
    angle: f64,
}

impl Pattern {
    fn random(index: usize, size: f64, rng: &mut impl Rng) -> Self {
        let shape = if index.is_multiple_of(2) {
            Shape::Bar {
                half_len: size * rng.random_range(0.2..0.35),
                half_width: size * rng.random_range(0.04..0.08),
            }
        } else {
            Shape::Blob {
                sigma: size * rng.random_range(0.07..0.14),
            }
        };
        Pattern {
            shape,
            cx: size * rng.random_range(0.3..0.7),
            cy: size * rng.random_range(0.3..0.7),
            angle: rng.random_range(0.0..PI),
        }
    }

    fn render(&self, size: usize) -> Vec<f64> {
        let (sin, cos) = self.angle.sin_cos();
        let mut out = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let dx = j as f64 + 0.5 - self.cx;
                let dy = i as f64 + 0.5 - self.cy;
                let v = match self.shape {
                    Shape::Bar { half_len, half_width } => {
                        let along = dx * cos + dy * sin;
                        let across = -dx * sin + dy * cos;
                        // soft edges, one pixel wide
                        let edge = |d: f64, half: f64| (half + 0.5 - d.abs()).clamp(0.0, 1.0);
                        edge(along, half_len) * edge(across, half_width)
                    }
                    Shape::Blob { sigma } => (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp(),
                };
                out.push(v);
            }
        }
        out
    }
}

/// Generates `num_classes` single-channel classes of `per_class` examples.
/// All classes start tagged meta-train.
pub fn synth_dataset(params: &SynthParams) -> Result<Dataset> {
    if params.num_classes == 0 || params.per_class == 0 || params.image_size == 0 {
        return Err(Error::Parameter(
            "synthetic dataset sizes must be positive".into(),
        ));
    }
    if !params.noise_sd.is_finite() || params.noise_sd < 0.0 {
        return Err(Error::Parameter(format!("noise_sd {}", params.noise_sd)));
    }
    if !(0.0..1.0).contains(&params.outlier_rate) {
        return Err(Error::Parameter(format!(
            "outlier_rate {} not in [0, 1)",
            params.outlier_rate
        )));
    }
    if params.outlier_rate > 0.0 && params.num_classes < 2 {
        return Err(Error::Parameter("outliers need at least two classes".into()));
    }
    let size = params.image_size;
    let mut rng = stream(params.seed, Stream::Synthesis);
    let templates: Vec<Vec<f64>> = (0..params.num_classes)
        .map(|c| Pattern::random(c, size as f64, &mut rng).render(size))
        .collect();
    let noise = Normal::new(0.0, params.noise_sd).expect("validated std");
    let mut ds = Dataset::new(
        1,
        size,
        size,
        format!(
            "synthetic: classes={} per_class={} size={} noise_sd={} outlier_rate={} seed={}",
            params.num_classes, params.per_class, size, params.noise_sd, params.outlier_rate, params.seed
        ),
    );
    for c in 0..params.num_classes {
        let mut examples = Vec::with_capacity(params.per_class);
        let mut flags = Vec::with_capacity(params.per_class);
        for _ in 0..params.per_class {
            let outlier = params.outlier_rate > 0.0 && rng.random::<f64>() < params.outlier_rate;
            let source = if outlier {
                let other = rng.random_range(0..params.num_classes - 1);
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            };
            let data = templates[source]
                .iter()
                .map(|&v| {
                    let n = if params.noise_sd > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (v + n).clamp(0.0, 1.0)
                })
                .collect();
            examples.push(Tensor::new(&[1, size, size], data)?);
            flags.push(outlier);
        }
        ds.push_class(format!("synth{c:04}"), examples, flags)?;
    }
    Ok(ds)
}
