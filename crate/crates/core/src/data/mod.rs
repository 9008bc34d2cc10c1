//! Datasets of labelled images with meta-train / validation / test class
//! splits.

pub mod image;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::image::{load_image_dataset, resize_bilinear, rotate90, LoadOptions};
pub use self::synth::{synth_dataset, SynthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
    /// Each `[ch, h, w]` with values in `[0, 1]`.
    pub examples: Vec<Tensor>,
    /// Ground-truth planted-outlier flag per example (synthetic data only;
    /// all false otherwise).
    pub outliers: Vec<bool>,
}

/// Immutable after construction; share freely.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassEntry>,
    /// Source path or generator parameters.
    pub provenance: String,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, provenance: impl Into<String>) -> Self {
        Dataset {
            channels,
            height,
            width,
            classes: Vec::new(),
            provenance: provenance.into(),
        }
    }

    pub fn example_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Appends a meta-train class after checking shapes and pixel range.
    pub fn push_class(
        &mut self,
        name: impl Into<String>,
        examples: Vec<Tensor>,
        outliers: Vec<bool>,
    ) -> Result<()> {
        let name = name.into();
        if examples.is_empty() {
            return Err(Error::Data(format!("class {name:?} has no examples")));
        }
        if outliers.len() != examples.len() {
            return Err(Error::Data(format!(
                "class {name:?}: outlier flags do not match examples"
            )));
        }
        for e in &examples {
            if e.shape() != self.example_shape() {
                return Err(Error::Shape(format!(
                    "class {name:?}: example {:?} in a {:?} dataset",
                    e.shape(),
                    self.example_shape()
                )));
            }
            if e.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("class {name:?}: pixel outside [0, 1]")));
            }
        }
        self.classes.push(ClassEntry {
            name,
            split: Split::Train,
            examples,
            outliers,
        });
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Indices of the classes tagged `split`.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.classes_in(Split::Train).len(),
            self.classes_in(Split::Validation).len(),
            self.classes_in(Split::Test).len(),
        )
    }
}

/// Randomly tags `train`, `val` and `test` classes; the counts must add up
/// to the class total.
pub fn split_classes(mut ds: Dataset, counts: (usize, usize, usize), rng: &mut impl Rng) -> Result<Dataset> {
    let (train, val, test) = counts;
    if train + val + test != ds.num_classes() {
        return Err(Error::Parameter(format!(
            "split {train}+{val}+{test} = {} but the dataset has {} classes",
            train + val + test,
            ds.num_classes()
        )));
    }
    let mut order: Vec<usize> = (0..ds.num_classes()).collect();
    order.shuffle(rng);
    for (rank, &class) in order.iter().enumerate() {
        ds.classes[class].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(ds)
}

/// Replaces every class with four classes holding its examples rotated by
/// 0, 90, 180 and 270 degrees. Rotated variants keep the split tag of
/// their source class.
pub fn augment_rotations(ds: &Dataset) -> Result<Dataset> {
    if ds.height != ds.width {
        return Err(Error::Shape(format!(
            "rotation augmentation needs square images, got {}x{}",
            ds.height, ds.width
        )));
    }
    let mut out = Dataset {
        classes: Vec::with_capacity(ds.num_classes() * 4),
        provenance: format!("{} + rot90 augmentation", ds.provenance),
        ..ds.clone()
    };
    for class in &ds.classes {
        let mut current = class.examples.clone();
        for quarter in 0..4 {
            if quarter > 0 {
                current = current.iter().map(rotate90).collect::<Result<_>>()?;
            }
            out.classes.push(ClassEntry {
                name: format!("{}/rot{}", class.name, quarter * 90),
                split: class.split,
                examples: current.clone(),
                outliers: class.outliers.clone(),
            });
        }
    }
    Ok(out)
}
