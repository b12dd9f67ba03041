//! Reconstruction decoder for the sparse text branch.
//!
//! Learnable mask tokens are interleaved with the sparse text's word states
//! according to a placement strategy, the joint sequence runs through a
//! bidirectional Transformer stack, and the decoded mask-token outputs are
//! averaged and projected into the shared space. The result is added to the
//! pooled sparse embedding:
//!
//! `t_hat = proj(mean(decoded mask outputs)) + t_s`
//!
//! The final projection starts at zero, so an untrained decoder is exactly
//! the identity on `t_s`; alignment-only training is then plain fine-tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Binder, Param, ParamSet};
use crate::transformer::{init_stack, stack_forward, StackDims};

/// Where mask tokens sit relative to the word states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Prefix,
    Surround,
    Postfix,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Prefix, Placement::Surround, Placement::Postfix];
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Placement::Prefix => write!(f, "prefix"),
            Placement::Surround => write!(f, "surround"),
            Placement::Postfix => write!(f, "postfix"),
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "prefix" => Ok(Placement::Prefix),
            "surround" => Ok(Placement::Surround),
            "postfix" => Ok(Placement::Postfix),
            other => Err(format!("unknown placement '{}'", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number of learnable mask tokens (K).
    pub n_mask_tokens: usize,
    pub placement: Placement,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Equals the encoders' model_dim: word states enter unprojected.
    pub model_dim: usize,
    /// Dimension of the shared embedding space.
    pub embed_dim: usize,
    /// Longest word-state sequence; sizes the positional table.
    pub max_word_positions: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_mask_tokens,
            self.n_layers,
            self.n_heads,
            self.model_dim,
            self.embed_dim,
            self.max_word_positions,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "decoder model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Desk-scale defaults: K=8, depth 4, 4 heads.
    pub fn toy(max_word_positions: usize) -> Self {
        DecoderConfig {
            n_mask_tokens: 8,
            placement: Placement::Surround,
            n_layers: 4,
            n_heads: 4,
            model_dim: 32,
            embed_dim: 32,
            max_word_positions,
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

/// One position of the joint decoder sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Mask token `k` (0-based).
    Mask(usize),
    /// Word state `j` of the input sequence (0-based).
    Word(usize),
}

/// Assign every position of the joint sequence to a mask token or a word.
///
/// Prefix puts all K mask tokens before the words, Postfix after; Surround
/// splits them ceil(K/2) before / floor(K/2) after. Word order is preserved
/// and every slot is used exactly once.
pub fn place_tokens(placement: Placement, seq_len: usize, k: usize) -> Vec<Slot> {
    let mut layout = Vec::with_capacity(seq_len + k);
    let (before, after) = match placement {
        Placement::Prefix => (k, 0),
        Placement::Postfix => (0, k),
        Placement::Surround => (k.div_ceil(2), k / 2),
    };
    layout.extend((0..before).map(Slot::Mask));
    layout.extend((0..seq_len).map(Slot::Word));
    layout.extend((before..before + after).map(Slot::Mask));
    layout
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub prefix: String,
}

/// Output of one reconstruction: the final sparse embedding and the decoded
/// context term, with `t_hat = t_bar + t_s` holding by construction.
pub struct Reconstruction {
    pub t_hat: Tensor,
    pub t_bar: Tensor,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, prefix: impl Into<String>) -> Self {
        Decoder {
            cfg,
            prefix: prefix.into(),
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng, set: &mut ParamSet) {
        let p = &self.prefix;
        let dm = self.cfg.model_dim;
        let k = self.cfg.n_mask_tokens;
        set.insert(
            format!("{}.mask.tok", p),
            Param::new(vec![k, dm], uniform_init(rng, k * dm, 0.02)),
        );
        set.insert(
            format!("{}.mask.pos", p),
            Param::new(vec![k, dm], uniform_init(rng, k * dm, 0.02)),
        );
        let total = self.cfg.max_word_positions + k;
        set.insert(
            format!("{}.pos", p),
            Param::new(vec![total, dm], uniform_init(rng, total * dm, 0.02)),
        );
        init_stack(rng, set, p, self.cfg.dims());
        // Zero projection: training starts from t_hat == t_s exactly.
        set.insert(
            format!("{}.proj.w", p),
            Param::zeros(vec![dm, self.cfg.embed_dim]),
        );
        set.insert(format!("{}.proj.b", p), Param::zeros(vec![self.cfg.embed_dim]));
    }

    /// Decode the joint mask/word sequence and form the final sparse
    /// embedding.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        word_states: Tensor,
        t_s: Tensor,
    ) -> Result<Reconstruction> {
        let k = self.cfg.n_mask_tokens;
        let dm = self.cfg.model_dim;
        let (seq_len, width) = match g.shape(word_states) {
            [l, w] => (*l, *w),
            s => {
                return Err(Error::InvalidArgument {
                    op: "reconstruct",
                    msg: format!("word states must be [len, model_dim], got {:?}", s),
                })
            }
        };
        if seq_len == 0 {
            return Err(Error::EmptySequence { op: "reconstruct" });
        }
        if width != dm {
            return Err(Error::ShapeMismatch {
                op: "reconstruct",
                lhs: vec![seq_len, width],
                rhs: vec![seq_len, dm],
            });
        }
        if seq_len > self.cfg.max_word_positions {
            return Err(Error::InvalidArgument {
                op: "reconstruct",
                msg: format!(
                    "sequence length {} exceeds max {}",
                    seq_len, self.cfg.max_word_positions
                ),
            });
        }
        if g.shape(t_s) != [self.cfg.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "reconstruct",
                lhs: g.shape(t_s).to_vec(),
                rhs: vec![self.cfg.embed_dim],
            });
        }

        let p = &self.prefix;
        let tok = binder.bind(g, set, &format!("{}.mask.tok", p));
        let slot_pos = binder.bind(g, set, &format!("{}.mask.pos", p));
        let mask_in = g.add(tok, slot_pos)?;

        // Rows 0..K are mask tokens, rows K.. are words; gather in layout
        // order, then add absolute positional embeddings so placement is
        // visible to the (otherwise permutation-equivariant) attention.
        let layout = place_tokens(self.cfg.placement, seq_len, k);
        let pool_rows = g.concat_along_axis(&[mask_in, word_states], 0)?;
        let order: Vec<usize> = layout
            .iter()
            .map(|slot| match slot {
                Slot::Mask(i) => *i,
                Slot::Word(j) => k + j,
            })
            .collect();
        let arranged = g.gather_rows(pool_rows, &order)?;
        let pos_table = binder.bind(g, set, &format!("{}.pos", p));
        let pos = g.slice_rows(pos_table, 0, seq_len + k)?;
        let x = g.add(arranged, pos)?;

        let decoded = stack_forward(g, binder, set, p, x, self.cfg.dims())?;

        let mask_positions: Vec<usize> = layout
            .iter()
            .enumerate()
            .filter_map(|(pos, slot)| matches!(slot, Slot::Mask(_)).then_some(pos))
            .collect();
        let mask_out = g.gather_rows(decoded, &mask_positions)?;
        let mean = g.mean_over_axis(mask_out, 0)?;

        let w = binder.bind(g, set, &format!("{}.proj.w", p));
        let b = binder.bind(g, set, &format!("{}.proj.b", p));
        let mean_row = g.reshape(mean, vec![1, dm])?;
        let proj = g.matmul(mean_row, w)?;
        let proj_b = g.broadcast_add_row(proj, b)?;
        let t_bar = g.reshape(proj_b, vec![self.cfg.embed_dim])?;
        let t_hat = g.add(t_bar, t_s)?;
        Ok(Reconstruction { t_hat, t_bar })
    }
}
