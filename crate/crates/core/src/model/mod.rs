//! Decoder-only toy transformer with an exact residual-stream decomposition.
//!
//! Every component reads the sum of the outputs of the components before it
//! and writes its own output back into that sum. Attention heads and MLPs are
//! the graph nodes; the token+position embedding is the input node and the
//! unembedding is the logits node. With `Normalization::None` the input of
//! every node is literally the sum of upstream node outputs, which is what
//! makes edge-level patching exact.

mod backward;
mod checkpoint;
mod forward;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub use backward::MetricGradients;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{ActivationCache, EdgeMask, Patch, PatchedRun};
pub use train::{train, TrainOptions, TrainReport};

/// Where normalization happens. `RmsInternal` rescales each node's summed
/// input inside the node (no learned gain), which keeps the residual sum
/// itself untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    RmsInternal,
}

/// Architecture and initialization seed. The nonlinearity is always the tanh
/// approximation of GELU.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub normalization: Normalization,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Number of graph nodes that write to the residual stream
    /// (input, heads, MLPs).
    pub fn n_producers(&self) -> usize {
        1 + self.n_layers * (self.n_heads + 1)
    }

    pub fn head_index(&self, layer: usize, head: usize) -> usize {
        1 + layer * (self.n_heads + 1) + head
    }

    pub fn mlp_index(&self, layer: usize) -> usize {
        1 + layer * (self.n_heads + 1) + self.n_heads
    }

    pub fn logits_index(&self) -> usize {
        self.n_producers()
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, a, dh, dm) = (self.d_model, self.n_heads, self.d_head, self.d_mlp);
        let embed = self.vocab_size * d + self.max_positions * d;
        let per_layer = a * (4 * d * dh) + (d * dm + dm + dm * d + d);
        embed + self.n_layers * per_layer + d * self.vocab_size
    }

    /// Short stable fingerprint used to tie circuits to the model they came from.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<S> {
    /// `d_model × d_head`
    pub w_q: Mat<S>,
    pub w_k: Mat<S>,
    pub w_v: Mat<S>,
    /// `d_head × d_model`
    pub w_o: Mat<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S> {
    /// `d_model × d_mlp`
    pub w_in: Mat<S>,
    pub b_in: Vec<S>,
    /// `d_mlp × d_model`
    pub w_out: Mat<S>,
    pub b_out: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub heads: Vec<HeadParams<S>>,
    pub mlp: MlpParams<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    /// `vocab_size × d_model`
    pub tok_embed: Mat<S>,
    /// `max_positions × d_model`
    pub pos_embed: Mat<S>,
    pub layers: Vec<LayerParams<S>>,
    /// `d_model × vocab_size`
    pub unembed: Mat<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, dh, dm) = (config.d_model, config.d_head, config.d_mlp);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                heads: (0..config.n_heads)
                    .map(|_| HeadParams {
                        w_q: Mat::zeros(d, dh),
                        w_k: Mat::zeros(d, dh),
                        w_v: Mat::zeros(d, dh),
                        w_o: Mat::zeros(dh, d),
                    })
                    .collect(),
                mlp: MlpParams {
                    w_in: Mat::zeros(d, dm),
                    b_in: vec![S::zero(); dm],
                    w_out: Mat::zeros(dm, d),
                    b_out: vec![S::zero(); d],
                },
            })
            .collect();
        Self {
            tok_embed: Mat::zeros(config.vocab_size, d),
            pos_embed: Mat::zeros(config.max_positions, d),
            layers,
            unembed: Mat::zeros(d, config.vocab_size),
        }
    }

    /// Parameter blocks in checkpoint order: token embedding, position
    /// embedding, then per layer each head's `w_q, w_k, w_v, w_o` followed by
    /// the MLP's `w_in, b_in, w_out, b_out`, and finally the unembedding.
    pub fn blocks(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = vec![self.tok_embed.as_slice(), self.pos_embed.as_slice()];
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend([h.w_q.as_slice(), h.w_k.as_slice(), h.w_v.as_slice(), h.w_o.as_slice()]);
            }
            let m = &layer.mlp;
            out.extend([m.w_in.as_slice(), &m.b_in[..], m.w_out.as_slice(), &m.b_out[..]]);
        }
        out.push(self.unembed.as_slice());
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> =
            vec![self.tok_embed.as_mut_slice(), self.pos_embed.as_mut_slice()];
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.push(h.w_q.as_mut_slice());
                out.push(h.w_k.as_mut_slice());
                out.push(h.w_v.as_mut_slice());
                out.push(h.w_o.as_mut_slice());
            }
            let m = &mut layer.mlp;
            out.push(m.w_in.as_mut_slice());
            out.push(&mut m.b_in[..]);
            out.push(m.w_out.as_mut_slice());
            out.push(&mut m.b_out[..]);
        }
        out.push(self.unembed.as_mut_slice());
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|x| *x = S::zero());
        }
    }
}

/// Gaussian initialization with standard deviation 0.02 for every matrix and
/// zero biases, drawn in checkpoint block order from the config's seed.
pub fn build_model<S: Scalar>(config: &ModelConfig) -> Result<Transformer<S>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid normal");
    let mut gen = rng::seeded(config.seed);
    {
        use rand_distr::Distribution;
        let n_layers = params.layers.len();
        let mut blocks = params.blocks_mut();
        // Block kinds: two embeddings, then per layer (heads*4 matrices, w_in,
        // b_in, w_out, b_out), then the unembedding.
        let per_layer = 4 * config.n_heads + 4;
        for (i, block) in blocks.iter_mut().enumerate() {
            let is_bias = i >= 2 && i < 2 + n_layers * per_layer && {
                let j = (i - 2) % per_layer;
                j == 4 * config.n_heads + 1 || j == 4 * config.n_heads + 3
            };
            if is_bias {
                continue;
            }
            for x in block.iter_mut() {
                *x = S::lit(normal.sample(&mut gen));
            }
        }
    }
    Ok(Transformer { config: config.clone(), params })
}

/// A configured model.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<S> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::<S>::zeros(&config);
        let shapes_match = expected
            .blocks()
            .iter()
            .zip(params.blocks())
            .all(|(a, b)| a.len() == b.len())
            && params.layers.len() == config.n_layers;
        if !shapes_match {
            return Err(Error::InvalidConfig("parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_positions });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + S::lit(0.044715) * x2 * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::lit(3.0 * 0.044715) * x2);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
}
