//! Assembly of the three encoders and the reconstruction decoder into one
//! retrieval model over a shared parameter set.
//!
//! Parameter prefixes: `img` (image encoder), `txtd` (dense text encoder,
//! the stage-2 teacher), `txts` (sparse text encoder), `dec` (decoder and
//! mask tokens).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::corpus::CorpusConfig;
use crate::decoder::{Decoder, DecoderConfig, Reconstruction};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamSet};

pub const IMAGE_PREFIX: &str = "img";
pub const DENSE_PREFIX: &str = "txtd";
pub const SPARSE_PREFIX: &str = "txts";
pub const DECODER_PREFIX: &str = "dec";

/// How the sparse text encoder starts stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparseInit {
    /// Copy of the frozen dense encoder (default: keeps the distillation
    /// target reachable from step 0).
    CopyDense,
    /// Fresh random initialization.
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: EncoderConfig,
    pub dense_text: EncoderConfig,
    pub sparse_text: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Desk-scale model sized for a corpus: d=32, model_dim=32, 2 layers and
    /// 2 heads per encoder, K=8 mask tokens over a 4-layer 4-head decoder.
    pub fn toy_for(corpus: &CorpusConfig) -> Self {
        let vocab = corpus.vocab_size().max(64);
        let dense_max = corpus.dense_len().max(64);
        let sparse_max = corpus.sparse_len().max(12);
        ModelConfig {
            image: EncoderConfig::toy_image(corpus.n_attributes),
            dense_text: EncoderConfig::toy_text(vocab, dense_max),
            sparse_text: EncoderConfig::toy_text(vocab, sparse_max),
            decoder: DecoderConfig::toy(sparse_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.dense_text.validate()?;
        self.sparse_text.validate()?;
        self.decoder.validate()?;
        let d = self.image.embed_dim;
        if self.dense_text.embed_dim != d || self.sparse_text.embed_dim != d {
            return Err(Error::Config(
                "all encoders must share one embedding dimension".into(),
            ));
        }
        if self.decoder.embed_dim != d {
            return Err(Error::Config("decoder embed_dim must match encoders".into()));
        }
        if self.decoder.model_dim != self.sparse_text.model_dim {
            return Err(Error::Config(
                "decoder model_dim must equal the sparse encoder's model_dim".into(),
            ));
        }
        if self.decoder.max_word_positions < self.sparse_text.max_positions {
            return Err(Error::Config(
                "decoder positional table shorter than sparse sequences".into(),
            ));
        }
        Ok(())
    }

    /// Copying the dense encoder into the sparse slot requires identical
    /// architectures.
    pub fn supports_copy_init(&self) -> bool {
        let d = &self.dense_text;
        let s = &self.sparse_text;
        d.input == s.input
            && d.model_dim == s.model_dim
            && d.n_layers == s.n_layers
            && d.n_heads == s.n_heads
            && d.embed_dim == s.embed_dim
            && d.max_positions >= s.max_positions
    }
}

/// Stateless forward logic; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    image: Encoder,
    dense: Encoder,
    sparse: Encoder,
    decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            image: Encoder::new(cfg.image, IMAGE_PREFIX),
            dense: Encoder::new(cfg.dense_text, DENSE_PREFIX),
            sparse: Encoder::new(cfg.sparse_text, SPARSE_PREFIX),
            decoder: Decoder::new(cfg.decoder, DECODER_PREFIX),
            cfg,
        })
    }

    /// Stage-1 parameters: image and dense text encoders.
    pub fn init_stage1_params(&self, seed: u64) -> ParamSet {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5161_0000);
        self.image.init_params(&mut rng, &mut set);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5161_0001);
        self.dense.init_params(&mut rng, &mut set);
        set
    }

    /// Add stage-2 parameters (sparse encoder and decoder) to a set holding
    /// stage-1 parameters.
    pub fn add_stage2_params(&self, set: &mut ParamSet, seed: u64, sparse_init: SparseInit) -> Result<()> {
        match sparse_init {
            SparseInit::CopyDense => {
                if !self.cfg.supports_copy_init() {
                    return Err(Error::Config(
                        "sparse encoder cannot copy the dense encoder: architectures differ".into(),
                    ));
                }
                set.copy_prefix(DENSE_PREFIX, SPARSE_PREFIX);
                // dense tables may be longer than the sparse encoder needs;
                // truncate positions and pooling logits to the sparse caps
                let max = self.cfg.sparse_text.max_positions;
                let pos = set.get_mut(&format!("{}.pos", SPARSE_PREFIX)).unwrap();
                let dm = pos.shape[1];
                pos.data.truncate(max * dm);
                pos.shape[0] = max;
                let pool = set.get_mut(&format!("{}.pool.w", SPARSE_PREFIX)).unwrap();
                pool.data.truncate(max);
                pool.shape[1] = max;
            }
            SparseInit::Scratch => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5161_0002);
                self.sparse.init_params(&mut rng, &mut set);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5161_0003);
        self.decoder.init_params(&mut rng, &mut set);
        Ok(())
    }

    pub fn embed_image(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        patches: &[Vec<f64>],
    ) -> Result<Tensor> {
        self.image.encode_patches(g, binder, set, patches)
    }

    /// Dense-text embedding (the stage-2 teacher signal).
    pub fn embed_dense(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        tokens: &[usize],
    ) -> Result<Tensor> {
        let (_, pooled) = self.dense.encode_tokens(g, binder, set, tokens)?;
        Ok(pooled)
    }

    /// Sparse branch without the decoder: word states plus pooled `t_s`.
    pub fn encode_sparse(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        tokens: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        self.sparse.encode_tokens(g, binder, set, tokens)
    }

    /// Full sparse branch: encoder, mask-token decoder, residual sum.
    pub fn sparse_branch(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        set: &ParamSet,
        tokens: &[usize],
    ) -> Result<Reconstruction> {
        let (words, t_s) = self.sparse.encode_tokens(g, binder, set, tokens)?;
        self.decoder.reconstruct(g, binder, set, words, t_s)
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }
}
