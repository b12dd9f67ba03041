//! Deterministic synthetic corpus of image/dense-text/sparse-text triples.
//!
//! Each latent scene holds `A` attribute slots, every slot carrying one of
//! `V` values. The "image" is a 16-patch feature grid derived from the
//! attributes plus seeded noise; the dense description enumerates all `A`
//! attributes; each of the 5 sparse views covers a random `k`-subset. Dense
//! text is therefore strictly longer and strictly more informative than any
//! single view, and two scenes can share a view — short descriptions are
//! genuinely ambiguous.
//!
//! Token layout: slot `a` is token `a`, value `v` is token `A + v`, and the
//! separator is token `A + V`. An attribute `(a, v)` serializes to the
//! triple `(SLOT_a, VAL_v, SEP)`.
//!
//! Generation is a pure function of `(config, seed)`: scene attributes come
//! from an injective mixed-radix map over scene ids, and per-scene noise is
//! drawn from an rng seeded by `(seed, scene_id)`, so scenes can be produced
//! in any order (or in parallel) and merged by id.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patches per scene grid.
pub const N_PATCHES: usize = 16;
/// Sparse views per scene.
pub const N_VIEWS: usize = 5;
/// Scale of the deterministic per-patch offset pattern.
const PATCH_PATTERN_SCALE: f64 = 0.01;

const SCHEMA: &str = "vse-corpus-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Attribute slots per scene (A).
    pub n_attributes: usize,
    /// Values per slot (V).
    pub n_values: usize,
    /// Attributes covered by each sparse view (k).
    pub view_attributes: usize,
    /// Half-width of the uniform per-patch noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 512,
            n_val: 64,
            n_test: 64,
            n_attributes: 8,
            n_values: 8,
            view_attributes: 2,
            noise_scale: 0.005,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("all split counts must be nonzero".into()));
        }
        if self.n_attributes == 0 || self.n_values == 0 {
            return Err(Error::Config("need at least one attribute and value".into()));
        }
        if self.view_attributes >= self.n_attributes {
            return Err(Error::Config(format!(
                "view_attributes ({}) must be smaller than n_attributes ({})",
                self.view_attributes, self.n_attributes
            )));
        }
        if self.view_attributes == 0 {
            return Err(Error::Config("view_attributes must be nonzero".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be nonnegative".into()));
        }
        let total = (self.n_train + self.n_val + self.n_test) as u128;
        let space = (self.n_values as u128)
            .checked_pow(self.n_attributes as u32)
            .ok_or_else(|| Error::Config("attribute space overflows".into()))?;
        if total > space {
            return Err(Error::Config(format!(
                "{} scenes exceed the {} distinct attribute tuples available",
                total, space
            )));
        }
        if n_choose_k(self.n_attributes, self.view_attributes) < N_VIEWS as u128 {
            return Err(Error::Config(format!(
                "cannot draw {} distinct {}-subsets of {} attributes",
                N_VIEWS, self.view_attributes, self.n_attributes
            )));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Token ids the corpus can emit are below this bound.
    pub fn vocab_size(&self) -> usize {
        self.n_attributes + self.n_values + 1
    }

    /// Length of every dense sequence (3 tokens per attribute).
    pub fn dense_len(&self) -> usize {
        3 * self.n_attributes
    }

    /// Length of every sparse view.
    pub fn sparse_len(&self) -> usize {
        3 * self.view_attributes
    }
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Latent scene: attribute assignment plus its derived patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub attributes: Vec<u8>,
    pub patches: Vec<Vec<f64>>,
}

/// One corpus item: scene, its full dense description, and 5 sparse views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub scene: Scene,
    pub split: Split,
    pub dense_tokens: Vec<usize>,
    pub sparse_views: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub scenes: Vec<ScenePair>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[ScenePair] {
        let (a, b) = match split {
            Split::Train => (0, self.config.n_train),
            Split::Val => (self.config.n_train, self.config.n_train + self.config.n_val),
            Split::Test => (
                self.config.n_train + self.config.n_val,
                self.config.n_total(),
            ),
        };
        &self.scenes[a..b]
    }
}

fn mix_seed(seed: u64, scene_id: u64) -> u64 {
    // splitmix64 finalizer over (seed, id)
    let mut z = seed ^ scene_id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Injective map scene_id -> attribute tuple: a seeded affine permutation of
/// the id space, read as base-V digits.
fn attributes_for(config: &CorpusConfig, mult: u128, offset: u128, scene_id: u64) -> Vec<u8> {
    let space = (config.n_values as u128).pow(config.n_attributes as u32);
    let mut x = (mult * scene_id as u128 + offset) % space;
    let mut attrs = Vec::with_capacity(config.n_attributes);
    for _ in 0..config.n_attributes {
        attrs.push((x % config.n_values as u128) as u8);
        x /= config.n_values as u128;
    }
    attrs
}

/// Multiplier coprime with V^A, derived from the seed.
fn affine_params(config: &CorpusConfig) -> (u128, u128) {
    let space = (config.n_values as u128).pow(config.n_attributes as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX));
    let offset = rng.gen::<u64>() as u128 % space;
    loop {
        let cand = (rng.gen::<u64>() as u128 % space) | 1;
        if gcd(cand, space) == 1 {
            return (cand, offset);
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Slot value centered in (-0.5, 0.5); adjacent values differ by 1/V.
fn value_center(v: u8, n_values: usize) -> f64 {
    (v as f64 + 0.5) / n_values as f64 - 0.5
}

/// Deterministic per-patch offset directions shared by all scenes.
fn patch_pattern(config: &CorpusConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX - 1));
    (0..N_PATCHES)
        .map(|_| {
            (0..config.n_attributes)
                .map(|_| rng.gen_range(-1.0..1.0) * PATCH_PATTERN_SCALE)
                .collect()
        })
        .collect()
}

fn generate_scene(config: &CorpusConfig, pattern: &[Vec<f64>], mult: u128, offset: u128, scene_id: u64, split: Split) -> ScenePair {
    let attributes = attributes_for(config, mult, offset, scene_id);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, scene_id));

    let signature: Vec<f64> = attributes
        .iter()
        .map(|&v| value_center(v, config.n_values))
        .collect();
    let patches: Vec<Vec<f64>> = (0..N_PATCHES)
        .map(|p| {
            signature
                .iter()
                .zip(&pattern[p])
                .map(|(s, o)| s + o + rng.gen_range(-1.0..1.0) * config.noise_scale)
                .collect()
        })
        .collect();

    let a = config.n_attributes;
    let sep = a + config.n_values;
    let attr_triple = |slot: usize| -> [usize; 3] {
        [slot, a + attributes[slot] as usize, sep]
    };
    let dense_tokens: Vec<usize> = (0..a).flat_map(attr_triple).collect();

    // 5 distinct k-subsets per scene, each listed in slot order
    let mut subsets: BTreeSet<Vec<usize>> = BTreeSet::new();
    while subsets.len() < N_VIEWS {
        let mut slots = BTreeSet::new();
        while slots.len() < config.view_attributes {
            slots.insert(rng.gen_range(0..a));
        }
        subsets.insert(slots.into_iter().collect());
    }
    // draw order, not subset order, decides which views exist; collect is
    // deterministic because the subsets are already fixed
    let sparse_views: Vec<Vec<usize>> = subsets
        .into_iter()
        .map(|slots| slots.into_iter().flat_map(attr_triple).collect())
        .collect();

    ScenePair {
        scene: Scene {
            scene_id,
            attributes,
            patches,
        },
        split,
        dense_tokens,
        sparse_views,
    }
}

/// Generate the full corpus for a config. Deterministic given the seed.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let pattern = patch_pattern(config);
    let (mult, offset) = affine_params(config);
    let scenes = (0..config.n_total() as u64)
        .map(|id| {
            let split = if (id as usize) < config.n_train {
                Split::Train
            } else if (id as usize) < config.n_train + config.n_val {
                Split::Val
            } else {
                Split::Test
            };
            generate_scene(config, &pattern, mult, offset, id, split)
        })
        .collect();
    Ok(Corpus {
        config: *config,
        scenes,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    config: CorpusConfig,
}

/// Write as JSON lines: a header carrying the schema version and config,
/// then one scene per line. Floats round-trip exactly.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        schema: SCHEMA.to_string(),
        config: corpus.config,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for pair in &corpus.scenes {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::CorpusFormat("empty file".into()))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::CorpusFormat(format!("bad header: {}", e)))?;
    if header.schema != SCHEMA {
        return Err(Error::CorpusFormat(format!(
            "schema version mismatch: expected {}, found {}",
            SCHEMA, header.schema
        )));
    }
    let mut scenes = Vec::with_capacity(header.config.n_total());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ScenePair = serde_json::from_str(&line)
            .map_err(|e| Error::CorpusFormat(format!("scene line {}: {}", i + 1, e)))?;
        scenes.push(pair);
    }
    if scenes.len() != header.config.n_total() {
        return Err(Error::CorpusFormat(format!(
            "expected {} scenes, found {} (truncated file?)",
            header.config.n_total(),
            scenes.len()
        )));
    }
    Ok(Corpus {
        config: header.config,
        scenes,
    })
}

/// Mean patch of one scene's grid.
fn centroid(patches: &[Vec<f64>]) -> Vec<f64> {
    let width = patches[0].len();
    let mut c = vec![0.0; width];
    for p in patches {
        for (acc, v) in c.iter_mut().zip(p) {
            *acc += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= patches.len() as f64);
    c
}

/// Fraction of patches whose nearest scene centroid is their own scene.
/// Separability by construction makes this 1.0 at default noise levels.
pub fn nn_patch_scene_accuracy(corpus: &Corpus) -> f64 {
    let centroids: Vec<Vec<f64>> = corpus
        .scenes
        .iter()
        .map(|p| centroid(&p.scene.patches))
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for (si, pair) in corpus.scenes.iter().enumerate() {
        for patch in &pair.scene.patches {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d = dist2(patch, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            hits += usize::from(best == si);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

/// Decode `(slot, value)` pairs from a token stream produced by this corpus.
pub fn decode_attribute_pairs(config: &CorpusConfig, tokens: &[usize]) -> Vec<(usize, usize)> {
    tokens
        .chunks(3)
        .filter(|c| c.len() == 3)
        .map(|c| (c[0], c[1] - config.n_attributes))
        .collect()
}
