use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Number of convolutional blocks in the embedding network.
pub const EMBED_BLOCKS: usize = 4;
/// Number of convolutional blocks in the attention network.
pub const ATTENTION_BLOCKS: usize = 2;
/// Zero-based indices of the embedding blocks that take a task dropout mask.
pub const DROPOUT_BLOCKS: [usize; 2] = [1, 2];
pub const BN_EPS: f64 = 1e-5;

/// Fixed shape information of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// 1 for grayscale, 3 for colour.
    pub in_channels: usize,
    /// Square input side.
    pub image_size: usize,
    pub embed_filters: usize,
    pub attention_filters: usize,
    /// Whether the fourth embedding block ends with max pooling.
    pub last_pool: bool,
    /// Width of the attention output layer; the deepest stack it can weight.
    pub m_max: usize,
}

impl Architecture {
    /// 64 embedding filters and 32 attention filters.
    pub fn standard(in_channels: usize, image_size: usize, last_pool: bool, m_max: usize) -> Self {
        Architecture {
            in_channels,
            image_size,
            embed_filters: 64,
            attention_filters: 32,
            last_pool,
            m_max,
        }
    }

    /// Side `l` of each embedding feature map.
    pub fn embedding_side(&self) -> Result<usize> {
        let mut side = self.image_size;
        for block in 0..EMBED_BLOCKS {
            if block + 1 == EMBED_BLOCKS && !self.last_pool {
                break;
            }
            if side < 2 {
                return Err(Error::Shape(format!(
                    "{}x{} input does not survive {} pooling stages",
                    self.image_size, self.image_size, EMBED_BLOCKS
                )));
            }
            side /= 2;
        }
        if side == 0 {
            return Err(Error::Shape(format!(
                "{} input pools down to nothing",
                self.image_size
            )));
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_filters == 0 || self.attention_filters == 0 {
            return Err(Error::Parameter("channel counts must be positive".into()));
        }
        if self.m_max == 0 {
            return Err(Error::Parameter("m_max must be positive".into()));
        }
        self.embedding_side().map(|_| ())
    }

    /// Flattened length of one embedding.
    pub fn embedding_len(&self) -> Result<usize> {
        let l = self.embedding_side()?;
        Ok(self.embed_filters * l * l)
    }
}

/// Convolution + batch-norm parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl ConvBlock {
    fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            kernel: he_normal(&[cout, cin, 3, 3], cin * 9, rng),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.kernel, &self.bias, &self.gamma, &self.beta]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.kernel, &mut self.bias, &mut self.gamma, &mut self.beta]
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// All trainable parameters: the embedding network and the single
/// attention network shared by every channel and every class.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub embedder: Vec<ConvBlock>,
    pub attention: Vec<ConvBlock>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

impl ModelParams {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let l = arch.embedding_side()?;
        let mut embedder = Vec::with_capacity(EMBED_BLOCKS);
        let mut cin = arch.in_channels;
        for _ in 0..EMBED_BLOCKS {
            embedder.push(ConvBlock::init(cin, arch.embed_filters, rng));
            cin = arch.embed_filters;
        }
        let mut attention = Vec::with_capacity(ATTENTION_BLOCKS);
        let mut cin = arch.m_max;
        for _ in 0..ATTENTION_BLOCKS {
            attention.push(ConvBlock::init(cin, arch.attention_filters, rng));
            cin = arch.attention_filters;
        }
        let fc_in = arch.attention_filters * l * l;
        let fc_weight = he_normal(&[arch.m_max, fc_in], fc_in, rng);
        let fc_bias = Tensor::zeros(&[arch.m_max]);
        Ok(ModelParams {
            arch,
            embedder,
            attention,
            fc_weight,
            fc_bias,
        })
    }

    /// Canonical parameter order; checkpoints and optimizer state follow it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, blocks) in [("embed", &self.embedder), ("attn", &self.attention)] {
            for (b, block) in blocks.iter().enumerate() {
                for (field, t) in ["kernel", "bias", "gamma", "beta"].iter().zip(block.tensors()) {
                    out.push((format!("{prefix}.{b}.{field}"), t));
                }
            }
        }
        out.push(("attn.fc.weight".to_string(), &self.fc_weight));
        out.push(("attn.fc.bias".to_string(), &self.fc_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in self.embedder.iter_mut().chain(self.attention.iter_mut()) {
            out.extend(block.tensors_mut());
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    /// Number of scalars in the attention network.
    pub fn attention_param_count(&self) -> usize {
        self.attention
            .iter()
            .flat_map(|b| b.tensors())
            .chain([&self.fc_weight, &self.fc_bias])
            .map(Tensor::numel)
            .sum()
    }

    pub fn embedder_param_count(&self) -> usize {
        self.embedder
            .iter()
            .flat_map(|b| b.tensors())
            .map(Tensor::numel)
            .sum()
    }

    /// Zeroes the attention output layer. Every K-shot stack then gets
    /// uniform weights, so class representatives reduce to class means.
    pub fn zero_attention_fc(&mut self) {
        self.fc_weight.data_mut().fill(0.0);
        self.fc_bias.data_mut().fill(0.0);
    }

    /// Places the parameters on `graph`, trainable or frozen.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let mut block_vars = |blocks: &[ConvBlock]| -> Vec<BlockVars> {
            blocks
                .iter()
                .map(|b| BlockVars {
                    kernel: leaf(&b.kernel),
                    bias: leaf(&b.bias),
                    gamma: leaf(&b.gamma),
                    beta: leaf(&b.beta),
                })
                .collect()
        };
        let embedder = block_vars(&self.embedder);
        let attention = block_vars(&self.attention);
        let fc_weight = leaf(&self.fc_weight);
        let fc_bias = leaf(&self.fc_bias);
        ParamVars {
            embedder,
            attention,
            fc_weight,
            fc_bias,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub kernel: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Graph handles of a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embedder: Vec<BlockVars>,
    pub attention: Vec<BlockVars>,
    pub fc_weight: Var,
    pub fc_bias: Var,
}

impl ParamVars {
    /// Handles in the canonical order of [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in self.embedder.iter().chain(&self.attention) {
            out.extend([b.kernel, b.bias, b.gamma, b.beta]);
        }
        out.push(self.fc_weight);
        out.push(self.fc_bias);
        out
    }
}
