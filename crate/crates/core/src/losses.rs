//! Objective functions: cosine similarity, hardest-negative triplet losses
//! for pretraining and alignment, dense-to-sparse distillation, and their
//! unit-weight sum.
//!
//! Embeddings are L2-normalized once before the batch similarity matrix, so
//! each entry is the cosine of its pair. Hardest negatives are mined within
//! the mini-batch; ties break toward the lowest index so mining is
//! oracle-matchable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Distillation distance between the teacher embedding and the reconstructed
/// sparse embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillKind {
    /// `1 - cos(t_dense, t_hat)`, in [0, 2].
    NegCosine,
    /// Mean absolute difference over the embedding dimension.
    L1,
    /// Mean squared difference over the embedding dimension.
    L2,
}

impl DistillKind {
    pub const ALL: [DistillKind; 3] = [DistillKind::L1, DistillKind::L2, DistillKind::NegCosine];
}

impl std::fmt::Display for DistillKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistillKind::NegCosine => write!(f, "neg-cosine"),
            DistillKind::L1 => write!(f, "l1"),
            DistillKind::L2 => write!(f, "l2"),
        }
    }
}

impl std::str::FromStr for DistillKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "neg-cosine" | "negcosine" | "cos" => Ok(DistillKind::NegCosine),
            "l1" => Ok(DistillKind::L1),
            "l2" => Ok(DistillKind::L2),
            other => Err(format!("unknown distillation kind '{}'", other)),
        }
    }
}

/// Loss hyperparameters. Both loss weights default to 1 (the joint objective
/// is a plain sum); they are kept configurable as an escape hatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub distill_kind: DistillKind,
    pub align_weight: f64,
    pub distill_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            distill_kind: DistillKind::NegCosine,
            align_weight: 1.0,
            distill_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Plain cosine-similarity scores for a batch: `rows` image embeddings
/// against `cols` text embeddings. `diagonal_positive` marks square matrices
/// whose row/column indices pair matched items.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub diagonal_positive: bool,
}

impl SimilarityMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Build from plain (non-graph) embeddings; used on the evaluation path.
    pub fn from_embeddings(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<Self> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let normalized = |vs: &[Vec<f64>], side: &str| -> Result<Vec<Vec<f64>>> {
            vs.iter()
                .enumerate()
                .map(|(i, v)| {
                    let n = norm(v);
                    if n == 0.0 {
                        return Err(Error::InvalidArgument {
                            op: "similarity_matrix",
                            msg: format!("{} {} has zero norm", side, i),
                        });
                    }
                    Ok(v.iter().map(|x| x / n).collect())
                })
                .collect()
        };
        let imgs = normalized(images, "image")?;
        let txts = normalized(texts, "text")?;
        let mut values = Vec::with_capacity(imgs.len() * txts.len());
        for img in &imgs {
            for txt in &txts {
                values.push(img.iter().zip(txt).map(|(a, b)| a * b).sum());
            }
        }
        Ok(SimilarityMatrix {
            rows: images.len(),
            cols: texts.len(),
            values,
            diagonal_positive: images.len() == texts.len(),
        })
    }
}

/// `a . b / (|a||b|)` as a graph scalar; errors on zero vectors.
pub fn cosine_similarity(g: &mut Graph, a: Tensor, b: Tensor) -> Result<Tensor> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let an = g.l2_normalize(a).map_err(|_| Error::ZeroVector {
        op: "cosine_similarity",
    })?;
    let bn = g.l2_normalize(b).map_err(|_| Error::ZeroVector {
        op: "cosine_similarity",
    })?;
    g.dot(an, bn)
}

/// Stack per-item embeddings into `[n, d]` rows, L2-normalizing each.
fn stack_normalized(g: &mut Graph, items: &[Tensor], side: &str) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::EmptySequence {
            op: "similarity_matrix",
        });
    }
    let mut rows = Vec::with_capacity(items.len());
    for (i, &t) in items.iter().enumerate() {
        let normed = g.l2_normalize(t).map_err(|_| Error::InvalidArgument {
            op: "similarity_matrix",
            msg: format!("{} {} has zero norm", side, i),
        })?;
        let d = g.shape(normed)[0];
        rows.push(g.reshape(normed, vec![1, d])?);
    }
    g.concat_along_axis(&rows, 0)
}

/// Batch cosine-similarity matrix as a graph tensor: entry `(r, c)` is the
/// cosine of image `r` and text `c`.
pub fn similarity_matrix(g: &mut Graph, images: &[Tensor], texts: &[Tensor]) -> Result<Tensor> {
    let imgs = stack_normalized(g, images, "image")?;
    let txts = stack_normalized(g, texts, "text")?;
    let tt = g.transpose(txts)?;
    g.matmul(imgs, tt)
}

/// Hardest negatives for one matched pair: the most similar non-matching
/// text for the image (row scan) and the most similar non-matching image for
/// the text (column scan).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardestPair {
    /// Column of the hardest negative text in row `i` (excluding `i`).
    pub text: usize,
    /// Row of the hardest negative image in column `i` (excluding `i`).
    pub image: usize,
}

/// Single-pass hardest-negative scan over a square similarity matrix with
/// diagonal positives. Ties break toward the lowest index.
pub fn mine_hardest(values: &[f64], n: usize) -> Vec<HardestPair> {
    debug_assert_eq!(values.len(), n * n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_text = usize::MAX;
        let mut best_text_sim = f64::NEG_INFINITY;
        let mut best_image = usize::MAX;
        let mut best_image_sim = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let row_sim = values[i * n + j];
            if row_sim > best_text_sim {
                best_text_sim = row_sim;
                best_text = j;
            }
            let col_sim = values[j * n + i];
            if col_sim > best_image_sim {
                best_image_sim = col_sim;
                best_image = j;
            }
        }
        out.push(HardestPair {
            text: best_text,
            image: best_image,
        });
    }
    out
}

/// Hardest-negative triplet loss over a square similarity matrix with
/// diagonal positives:
///
/// `sum_i [m - S(i,i) + S(i, t_i)]_+ + [m - S(i,i) + S(v_i, i)]_+`
///
/// where `t_i` / `v_i` are the mined hardest negatives. Requires n >= 2.
pub fn triplet_hardest_loss(g: &mut Graph, s: Tensor, margin: f64) -> Result<Tensor> {
    let n = match g.shape(s) {
        [r, c] if r == c => *r,
        shape => {
            return Err(Error::InvalidArgument {
                op: "triplet_hardest_loss",
                msg: format!("similarity matrix must be square, got {:?}", shape),
            })
        }
    };
    if n < 2 {
        return Err(Error::InvalidArgument {
            op: "triplet_hardest_loss",
            msg: format!("need at least 2 pairs to mine negatives, got {}", n),
        });
    }
    let mined = mine_hardest(g.data(s), n);

    let mut total: Option<Tensor> = None;
    for (i, pair) in mined.iter().enumerate() {
        let pos = g.index2d(s, i, i)?;
        for neg in [g.index2d(s, i, pair.text)?, g.index2d(s, pair.image, i)?] {
            let diff = g.sub(neg, pos)?;
            let shifted = g.add_const(diff, margin);
            let hinge = g.relu(shifted);
            total = Some(match total {
                Some(t) => g.add(t, hinge)?,
                None => hinge,
            });
        }
    }
    Ok(total.expect("n >= 2 guarantees at least one term"))
}

/// Distance between the dense teacher embedding and the reconstructed sparse
/// embedding (both `[d]`).
pub fn distill_loss(g: &mut Graph, t_dense: Tensor, t_hat: Tensor, kind: DistillKind) -> Result<Tensor> {
    if g.shape(t_dense) != g.shape(t_hat) || g.shape(t_dense).len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: g.shape(t_dense).to_vec(),
            rhs: g.shape(t_hat).to_vec(),
        });
    }
    let d = g.shape(t_dense)[0] as f64;
    match kind {
        DistillKind::NegCosine => {
            let cos = cosine_similarity(g, t_dense, t_hat).map_err(|e| match e {
                Error::ZeroVector { .. } => Error::ZeroVector { op: "distill_loss" },
                other => other,
            })?;
            let neg = g.scalar_mul(cos, -1.0);
            Ok(g.add_const(neg, 1.0))
        }
        DistillKind::L1 => {
            let diff = g.sub(t_dense, t_hat)?;
            let abs = g.abs(diff);
            let s = g.sum(abs);
            Ok(g.scalar_mul(s, 1.0 / d))
        }
        DistillKind::L2 => {
            let diff = g.sub(t_dense, t_hat)?;
            let sq = g.hadamard(diff, diff)?;
            let s = g.sum(sq);
            Ok(g.scalar_mul(s, 1.0 / d))
        }
    }
}

/// Joint objective: unit-weight sum of the alignment and distillation terms.
pub fn total_loss(g: &mut Graph, align: Tensor, distill: Tensor) -> Result<Tensor> {
    if g.data(align).len() != 1 || g.data(distill).len() != 1 {
        return Err(Error::InvalidArgument {
            op: "total_loss",
            msg: "both terms must be scalars".into(),
        });
    }
    g.add(align, distill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_of(g: &Graph, t: Tensor) -> f64 {
        g.value(t)
    }

    #[test]
    fn cosine_axes_and_hand_value() {
        let mut g = Graph::new();
        let e1 = g.leaf(vec![1.0, 0.0], vec![2], false);
        let e1b = g.leaf(vec![1.0, 0.0], vec![2], false);
        let e2 = g.leaf(vec![0.0, 1.0], vec![2], false);
        let same = cosine_similarity(&mut g, e1, e1b).unwrap();
        assert!((scalar_of(&g, same) - 1.0).abs() < 1e-15);
        let orth = cosine_similarity(&mut g, e1, e2).unwrap();
        assert!(scalar_of(&g, orth).abs() < 1e-15);

        // (1,2,2).(2,1,2) = 8, norms 3*3 = 9
        let a = g.leaf(vec![1.0, 2.0, 2.0], vec![3], false);
        let b = g.leaf(vec![2.0, 1.0, 2.0], vec![3], false);
        let c = cosine_similarity(&mut g, a, b).unwrap();
        assert!((scalar_of(&g, c) - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut g = Graph::new();
        let z = g.leaf(vec![0.0, 0.0], vec![2], false);
        let v = g.leaf(vec![1.0, 0.0], vec![2], false);
        assert!(matches!(
            cosine_similarity(&mut g, z, v),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn similarity_matrix_identity_on_basis() {
        let mut g = Graph::new();
        let e: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                g.leaf(v, vec![3], false)
            })
            .collect();
        let s = similarity_matrix(&mut g, &e, &e).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((g.data(s)[r * 3 + c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn similarity_matrix_matches_pairwise_loop() {
        let mut rng = StdRng::seed_from_u64(41);
        let imgs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let txts: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut g = Graph::new();
        let it: Vec<Tensor> = imgs.iter().map(|v| g.leaf(v.clone(), vec![6], false)).collect();
        let tt: Vec<Tensor> = txts.iter().map(|v| g.leaf(v.clone(), vec![6], false)).collect();
        let s = similarity_matrix(&mut g, &it, &tt).unwrap();

        for r in 0..8 {
            for c in 0..8 {
                let mut g2 = Graph::new();
                let a = g2.leaf(imgs[r].clone(), vec![6], false);
                let b = g2.leaf(txts[c].clone(), vec![6], false);
                let cos = cosine_similarity(&mut g2, a, b).unwrap();
                assert!((g.data(s)[r * 8 + c] - g2.value(cos)).abs() < 1e-12);
            }
        }

        // plain-path values agree with the graph path
        let plain = SimilarityMatrix::from_embeddings(&imgs, &txts).unwrap();
        for (a, b) in plain.values.iter().zip(g.data(s)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matrix_shape() {
        let mut g = Graph::new();
        let imgs: Vec<Tensor> = (0..2).map(|i| g.leaf(vec![1.0, i as f64], vec![2], false)).collect();
        let txts: Vec<Tensor> = (0..3).map(|i| g.leaf(vec![i as f64 + 1.0, 1.0], vec![2], false)).collect();
        let s = similarity_matrix(&mut g, &imgs, &txts).unwrap();
        assert_eq!(g.shape(s), &[2, 3]);
    }

    fn triplet_value(values: Vec<f64>, n: usize, margin: f64) -> f64 {
        let mut g = Graph::new();
        let s = g.leaf(values, vec![n, n], false);
        let loss = triplet_hardest_loss(&mut g, s, margin).unwrap();
        g.value(loss)
    }

    #[test]
    fn triplet_hand_enumerations() {
        // all four hinge terms inactive
        assert_eq!(triplet_value(vec![0.9, 0.3, 0.2, 0.8], 2, 0.2), 0.0);
        // hand enumeration: 0.3 + 0.1 + 0.1 + 0.3
        let v = triplet_value(vec![0.5, 0.6, 0.4, 0.5], 2, 0.2);
        assert!((v - 0.8).abs() < 1e-12);
        // maximal margin satisfied
        assert_eq!(
            triplet_value(vec![1.0, -1.0, -1.0, 1.0], 2, 0.2),
            0.0
        );
    }

    #[test]
    fn triplet_needs_two_pairs() {
        let mut g = Graph::new();
        let s = g.leaf(vec![1.0], vec![1, 1], false);
        assert!(triplet_hardest_loss(&mut g, s, 0.2).is_err());
    }

    #[test]
    fn mining_matches_bruteforce_with_ties() {
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..300 {
            let n = rng.gen_range(2..=12);
            let mut values: Vec<f64> = (0..n * n)
                .map(|_| {
                    // coarse grid forces frequent ties
                    (rng.gen_range(-4i32..=4) as f64) / 4.0
                })
                .collect();
            if trial % 3 == 0 {
                values.iter_mut().for_each(|v| *v = 0.5);
            }
            let fast = mine_hardest(&values, n);
            for i in 0..n {
                // oracle: full sort by (similarity desc, index asc)
                let mut row: Vec<(usize, f64)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (j, values[i * n + j]))
                    .collect();
                row.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                assert_eq!(fast[i].text, row[0].0, "row {} of {:?}", i, values);

                let mut col: Vec<(usize, f64)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (j, values[j * n + i]))
                    .collect();
                col.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                assert_eq!(fast[i].image, col[0].0, "col {} of {:?}", i, values);
            }
        }
    }

    #[test]
    fn mining_invariant_under_constant_shift() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..100 {
            let n = rng.gen_range(2..=10);
            let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let shifted: Vec<f64> = values.iter().map(|v| v + 0.37).collect();
            assert_eq!(mine_hardest(&values, n), mine_hardest(&shifted, n));
        }
    }

    #[test]
    fn distill_kinds_on_known_pairs() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.6, -0.8], vec![2], false);
        let same = g.leaf(vec![0.6, -0.8], vec![2], false);
        let opposite = g.leaf(vec![-0.6, 0.8], vec![2], false);
        let orth = g.leaf(vec![0.8, 0.6], vec![2], false);

        for kind in DistillKind::ALL {
            let l = distill_loss(&mut g, a, same, kind).unwrap();
            assert!(g.value(l).abs() < 1e-15, "{:?}", kind);
        }
        let l = distill_loss(&mut g, a, opposite, DistillKind::NegCosine).unwrap();
        assert!((g.value(l) - 2.0).abs() < 1e-12);
        let l = distill_loss(&mut g, a, orth, DistillKind::NegCosine).unwrap();
        assert!((g.value(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neg_cosine_scale_invariance() {
        let mut rng = StdRng::seed_from_u64(44);
        for _ in 0..50 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = rng.gen_range(0.1..10.0);
            let mut g = Graph::new();
            let xt = g.leaf(x.clone(), vec![8], false);
            let yt = g.leaf(y.clone(), vec![8], false);
            let xs = g.leaf(x.iter().map(|v| v * c).collect(), vec![8], false);
            let base = distill_loss(&mut g, xt, yt, DistillKind::NegCosine).unwrap();
            let scaled = distill_loss(&mut g, xs, yt, DistillKind::NegCosine).unwrap();
            assert!((g.value(base) - g.value(scaled)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_is_plain_sum() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.8], vec![], false);
        let d = g.leaf(vec![0.3], vec![], false);
        let t = total_loss(&mut g, a, d).unwrap();
        assert!((g.value(t) - 1.1).abs() < 1e-15);

        let z1 = g.leaf(vec![0.0], vec![], false);
        let z2 = g.leaf(vec![0.0], vec![], false);
        let z = total_loss(&mut g, z1, z2).unwrap();
        assert_eq!(g.value(z), 0.0);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences_off_kinks() {
        let mut rng = StdRng::seed_from_u64(45);
        let margin = 0.2;
        let mut checked = 0;
        while checked < 20 {
            let point: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.9..0.9)).collect();
            // exclude points near hinge boundaries so the loss is smooth there
            let mined = mine_hardest(&point, 4);
            let near_kink = (0..4).any(|i| {
                let pos = point[i * 4 + i];
                let h1 = margin - pos + point[i * 4 + mined[i].text];
                let h2 = margin - pos + point[mined[i].image * 4 + i];
                h1.abs() < 1e-4 || h2.abs() < 1e-4
            });
            if near_kink {
                continue;
            }
            checked += 1;
            let report = crate::autodiff::grad_check(
                |g, x| {
                    let s = g.reshape(x, vec![4, 4])?;
                    triplet_hardest_loss(g, s, margin)
                },
                &point,
                &[16],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(46);
        for kind in DistillKind::ALL {
            let mut done = 0;
            while done < 10 {
                let point: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // L1 has kinks where a_i == b_i; stay clear of them
                if (0..8).any(|i| (point[i] - point[8 + i]).abs() < 1e-3) {
                    continue;
                }
                done += 1;
                let report = crate::autodiff::grad_check(
                    |g, x| {
                        let m = g.reshape(x, vec![2, 8])?;
                        let a2 = g.slice_rows(m, 0, 1)?;
                        let b2 = g.slice_rows(m, 1, 1)?;
                        let a = g.reshape(a2, vec![8])?;
                        let b = g.reshape(b2, vec![8])?;
                        distill_loss(g, a, b, kind)
                    },
                    &point,
                    &[16],
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed, "{:?}: max rel err {}", kind, report.max_rel_err);
            }
        }
    }
}
