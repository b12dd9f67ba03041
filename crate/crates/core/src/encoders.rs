//! Image and text encoders emitting vectors in one shared embedding space.
//!
//! Three encoder instances share this code: the image encoder (patch-feature
//! grid in, one embedding out), the dense text encoder, and the sparse text
//! encoder. Text encoders also expose their final-layer word states, which
//! feed the reconstruction decoder.
//!
//! Feature aggregation is a learned softmax-weighted pooling over positions:
//! each position's weight is a trainable logit, so the pooled vector is a
//! convex combination of the per-position features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::params::{uniform_init, xavier_uniform, Binder, Param, ParamSet};
use crate::transformer::{init_stack, stack_forward, StackDims};

/// What the encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderInput {
    /// Integer token ids below `vocab_size`.
    Tokens { vocab_size: usize },
    /// Real-valued patch feature vectors of the given width.
    Patches { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input: EncoderInput,
    /// Longest token sequence (text) or number of grid patches (image).
    pub max_positions: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Dimension of the shared embedding space; identical across encoders.
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.max_positions,
            self.model_dim,
            self.n_layers,
            self.n_heads,
            self.embed_dim,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        match self.input {
            EncoderInput::Tokens { vocab_size } if vocab_size == 0 => {
                Err(Error::Config("vocab_size must be positive".into()))
            }
            EncoderInput::Patches { width } if width == 0 => {
                Err(Error::Config("patch width must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Desk-scale text encoder defaults.
    pub fn toy_text(vocab_size: usize, max_seq_len: usize) -> Self {
        EncoderConfig {
            input: EncoderInput::Tokens { vocab_size },
            max_positions: max_seq_len,
            model_dim: 32,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 32,
        }
    }

    /// Desk-scale image encoder defaults for a 16-patch grid.
    pub fn toy_image(patch_width: usize) -> Self {
        EncoderConfig {
            input: EncoderInput::Patches { width: patch_width },
            max_positions: 16,
            model_dim: 32,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 32,
        }
    }

    fn dims(&self) -> StackDims {
        StackDims {
            model_dim: self.model_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
        }
    }
}

/// One encoder instance; `prefix` namespaces its parameters in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Self {
        Encoder {
            cfg,
            prefix: prefix.into(),
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng, set: &mut ParamSet) {
        let p = &self.prefix;
        let dm = self.cfg.model_dim;
        match self.cfg.input {
            EncoderInput::Tokens { vocab_size } => {
                set.insert(
                    format!("{}.embed", p),
                    Param::new(vec![vocab_size, dm], uniform_init(rng, vocab_size * dm, 0.1)),
                );
            }
            EncoderInput::Patches { width } => {
                set.insert(
                    format!("{}.patch_proj.w", p),
                    Param::new(vec![width, dm], xavier_uniform(rng, width, dm)),
                );
                set.insert(format!("{}.patch_proj.b", p), Param::zeros(vec![dm]));
            }
        }
        set.insert(
            format!("{}.pos", p),
            Param::new(
                vec![self.cfg.max_positions, dm],
                uniform_init(rng, self.cfg.max_positions * dm, 0.02),
            ),
        );
        init_stack(rng, set, p, self.cfg.dims());
        set.insert(
            format!("{}.proj.w", p),
            Param::new(
                vec![dm, self.cfg.embed_dim],
                xavier_uniform(rng, dm, self.cfg.embed_dim),
            ),
        );
        set.insert(format!("{}.proj.b", p), Param::zeros(vec![self.cfg.embed_dim]));
        set.insert(
            format!("{}.pool.w", p),
            Param::zeros(vec![1, self.cfg.max_positions]),
        );
    }

    /// Encode a token sequence.
    ///
    /// Returns the final-layer word states (`[len, model_dim]`, decoder
    /// input) and the pooled embedding (`[embed_dim]`).
    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        tokens: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        let vocab_size = match self.cfg.input {
            EncoderInput::Tokens { vocab_size } => vocab_size,
            EncoderInput::Patches { .. } => {
                return Err(Error::InvalidArgument {
                    op: "encode_tokens",
                    msg: format!("{} is a patch encoder", self.prefix),
                })
            }
        };
        if tokens.is_empty() {
            return Err(Error::EmptySequence { op: "encode_tokens" });
        }
        if tokens.len() > self.cfg.max_positions {
            return Err(Error::InvalidArgument {
                op: "encode_tokens",
                msg: format!(
                    "sequence length {} exceeds max {}",
                    tokens.len(),
                    self.cfg.max_positions
                ),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab_size,
            });
        }

        let table = binder.bind(g, set, &format!("{}.embed", self.prefix));
        let emb = g.gather_rows(table, tokens)?;
        let (words, pooled) = self.trunk(g, binder, set, emb, tokens.len())?;
        Ok((words, pooled))
    }

    /// Encode a patch-feature grid into a single shared-space embedding.
    pub fn encode_patches(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        patches: &[Vec<f64>],
    ) -> Result<Tensor> {
        let width = match self.cfg.input {
            EncoderInput::Patches { width } => width,
            EncoderInput::Tokens { .. } => {
                return Err(Error::InvalidArgument {
                    op: "encode_patches",
                    msg: format!("{} is a token encoder", self.prefix),
                })
            }
        };
        if patches.is_empty() {
            return Err(Error::EmptySequence {
                op: "encode_patches",
            });
        }
        if patches.len() > self.cfg.max_positions {
            return Err(Error::InvalidArgument {
                op: "encode_patches",
                msg: format!(
                    "{} patches exceed max positions {}",
                    patches.len(),
                    self.cfg.max_positions
                ),
            });
        }
        if let Some(bad) = patches.iter().find(|p| p.len() != width) {
            return Err(Error::ShapeMismatch {
                op: "encode_patches",
                lhs: vec![patches.len(), width],
                rhs: vec![patches.len(), bad.len()],
            });
        }

        let flat: Vec<f64> = patches.iter().flatten().copied().collect();
        let x = g.leaf(flat, vec![patches.len(), width], false);
        let w = binder.bind(g, set, &format!("{}.patch_proj.w", self.prefix));
        let b = binder.bind(g, set, &format!("{}.patch_proj.b", self.prefix));
        let projected = g.matmul(x, w)?;
        let emb = g.broadcast_add_row(projected, b)?;
        let (_, pooled) = self.trunk(g, binder, set, emb, patches.len())?;
        Ok(pooled)
    }

    /// Positions + stack + shared-space projection + pooling.
    fn trunk(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        emb: Tensor,
        len: usize,
    ) -> Result<(Tensor, Tensor)> {
        let p = &self.prefix;
        let pos_table = binder.bind(g, set, &format!("{}.pos", p));
        let pos = g.slice_rows(pos_table, 0, len)?;
        let x = g.add(emb, pos)?;
        let words = stack_forward(g, binder, set, p, x, self.cfg.dims())?;

        let pw = binder.bind(g, set, &format!("{}.proj.w", p));
        let pb = binder.bind(g, set, &format!("{}.proj.b", p));
        let projected = g.matmul(words, pw)?;
        let seq = g.broadcast_add_row(projected, pb)?;

        let pool_table = binder.bind(g, set, &format!("{}.pool.w", p));
        let logits2 = g.slice_cols(pool_table, 0, len)?;
        let logits = g.reshape(logits2, vec![len])?;
        let pooled = pool(g, seq, logits)?;
        Ok((words, pooled))
    }
}

/// Softmax-weighted aggregation of a `[len, dim]` sequence into a `[dim]`
/// vector. A `-inf` logit masks its position out exactly.
pub fn pool(g: &mut Graph, seq: Tensor, logits: Tensor) -> Result<Tensor> {
    let len = match g.shape(seq) {
        [l, _] if *l > 0 => *l,
        [0, _] | [] => return Err(Error::EmptySequence { op: "pool" }),
        s => {
            return Err(Error::InvalidArgument {
                op: "pool",
                msg: format!("expected [len, dim] sequence, got {:?}", s),
            })
        }
    };
    if g.shape(logits) != [len] {
        return Err(Error::ShapeMismatch {
            op: "pool",
            lhs: g.shape(seq).to_vec(),
            rhs: g.shape(logits).to_vec(),
        });
    }
    let weights = g.softmax_lastdim(logits)?;
    let row = g.reshape(weights, vec![1, len])?;
    let pooled = g.matmul(row, seq)?;
    let dim = g.shape(seq)[1];
    g.reshape(pooled, vec![dim])
}
