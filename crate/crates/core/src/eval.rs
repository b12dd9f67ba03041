//! Bidirectional retrieval metrics: R@1/5/10 each way plus their sum.
//!
//! Text retrieval ranks all texts for each image query; image retrieval
//! ranks all images for each text query. With 5 views per scene, an image
//! query counts a hit when any of its views lands in the top k, and each
//! view has exactly one relevant image. Ranking ties break toward the lowest
//! item index, which makes the fast top-k path exactly reproducible by the
//! full-sort oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{ScenePair, N_VIEWS};
use crate::error::{Error, Result};
use crate::losses::SimilarityMatrix;
use crate::model::Model;
use crate::params::{Binder, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image query ranking texts (rows rank columns).
    ImageToText,
    /// Text query ranking images (columns rank rows).
    TextToImage,
}

/// Which branch embeds the text side.
///
/// Stage-1 checkpoints have no sparse branch; they read queries through the
/// dense encoder. Stage-2 checkpoints use the full sparse branch (encoder,
/// decoder, residual).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextBranch {
    Dense,
    Sparse,
}

fn check_args(
    s: &SimilarityMatrix,
    ground_truth: &[Vec<usize>],
    k: usize,
    direction: Direction,
) -> Result<(usize, usize)> {
    let (n_queries, n_items) = match direction {
        Direction::ImageToText => (s.rows, s.cols),
        Direction::TextToImage => (s.cols, s.rows),
    };
    if k == 0 || k > n_items {
        return Err(Error::InvalidArgument {
            op: "recall_at_k",
            msg: format!("k {} out of range for {} items", k, n_items),
        });
    }
    if ground_truth.len() != n_queries {
        return Err(Error::InvalidArgument {
            op: "recall_at_k",
            msg: format!(
                "{} ground-truth entries for {} queries",
                ground_truth.len(),
                n_queries
            ),
        });
    }
    for (q, rel) in ground_truth.iter().enumerate() {
        if rel.is_empty() {
            return Err(Error::InvalidArgument {
                op: "recall_at_k",
                msg: format!("query {} has an empty relevant set", q),
            });
        }
        if let Some(&bad) = rel.iter().find(|&&i| i >= n_items) {
            return Err(Error::InvalidArgument {
                op: "recall_at_k",
                msg: format!("query {}: relevant item {} out of range", q, bad),
            });
        }
    }
    Ok((n_queries, n_items))
}

fn score(s: &SimilarityMatrix, direction: Direction, query: usize, item: usize) -> f64 {
    match direction {
        Direction::ImageToText => s.get(query, item),
        Direction::TextToImage => s.get(item, query),
    }
}

/// Percentage of queries whose top-k ranked items intersect their relevant
/// set. Bounded top-k selection; O(items * k) per query.
pub fn recall_at_k(
    s: &SimilarityMatrix,
    ground_truth: &[Vec<usize>],
    k: usize,
    direction: Direction,
) -> Result<f64> {
    let (n_queries, n_items) = check_args(s, ground_truth, k, direction)?;
    let mut hits = 0usize;
    let mut topk: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in 0..n_queries {
        topk.clear();
        for item in 0..n_items {
            let sim = score(s, direction, q, item);
            // entries with equal similarity keep their earlier index ahead
            let pos = topk.partition_point(|&(v, _)| v >= sim);
            if pos < k {
                topk.insert(pos, (sim, item));
                topk.truncate(k);
            }
        }
        if topk.iter().any(|(_, item)| ground_truth[q].contains(item)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n_queries as f64)
}

/// Full-sort reference for [`recall_at_k`]: O(items log items) per query,
/// same tie rule. The two paths must agree exactly on every input.
pub fn ranking_oracle(
    s: &SimilarityMatrix,
    ground_truth: &[Vec<usize>],
    k: usize,
    direction: Direction,
) -> Result<f64> {
    let (n_queries, n_items) = check_args(s, ground_truth, k, direction)?;
    let mut hits = 0usize;
    for q in 0..n_queries {
        let mut ranked: Vec<(usize, f64)> = (0..n_items)
            .map(|item| (item, score(s, direction, q, item)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if ranked[..k].iter().any(|(item, _)| ground_truth[q].contains(item)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n_queries as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub name: String,
    pub n_images: usize,
    pub n_texts: usize,
}

/// Six recalls, their sum, and enough metadata to tie the numbers to a
/// model and split. `tr_*` is text retrieval (image query), `ir_*` image
/// retrieval (text query).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub tr_r1: f64,
    pub tr_r5: f64,
    pub tr_r10: f64,
    pub ir_r1: f64,
    pub ir_r5: f64,
    pub ir_r10: f64,
    pub rsum: f64,
    pub split: SplitMeta,
    pub model_checksum: String,
}

impl RetrievalReport {
    /// Sum the six recalls in a fixed left-to-right order; `rsum` is always
    /// reproducible from the stored values.
    pub fn assemble(tr: [f64; 3], ir: [f64; 3], split: SplitMeta, model_checksum: String) -> Self {
        let rsum = tr[0] + tr[1] + tr[2] + ir[0] + ir[1] + ir[2];
        RetrievalReport {
            tr_r1: tr[0],
            tr_r5: tr[1],
            tr_r10: tr[2],
            ir_r1: ir[0],
            ir_r5: ir[1],
            ir_r10: ir[2],
            rsum,
            split,
            model_checksum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let monotone = self.tr_r1 <= self.tr_r5
            && self.tr_r5 <= self.tr_r10
            && self.ir_r1 <= self.ir_r5
            && self.ir_r5 <= self.ir_r10;
        if !monotone {
            return Err(Error::InvalidArgument {
                op: "retrieval_report",
                msg: "recalls must be monotone in k".into(),
            });
        }
        let resum = self.tr_r1 + self.tr_r5 + self.tr_r10 + self.ir_r1 + self.ir_r5 + self.ir_r10;
        if resum != self.rsum {
            return Err(Error::InvalidArgument {
                op: "retrieval_report",
                msg: format!("rsum {} does not equal recall sum {}", self.rsum, resum),
            });
        }
        Ok(())
    }

    /// One row per direction and K, plus the sum.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("tr_r1", self.tr_r1),
            ("tr_r5", self.tr_r5),
            ("tr_r10", self.tr_r10),
            ("ir_r1", self.ir_r1),
            ("ir_r5", self.ir_r5),
            ("ir_r10", self.ir_r10),
            ("rsum", self.rsum),
        ] {
            out.push_str(&format!("{},{}\n", name, v));
        }
        out
    }
}

/// Per-scene embeddings for a split: one image vector and one vector per
/// sparse view. Extraction parallelizes across scenes and merges by index.
fn embed_split(
    model: &Model,
    params: &ParamSet,
    scenes: &[ScenePair],
    branch: TextBranch,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let per_scene: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> = scenes
        .par_iter()
        .map(|pair| {
            let id = pair.scene.scene_id;
            let ctx = |e: Error| Error::InvalidArgument {
                op: "evaluate",
                msg: format!("scene {}: {}", id, e),
            };
            let mut g = Graph::new();
            let mut b = Binder::all_frozen();
            let img = model
                .embed_image(&mut g, &mut b, params, &pair.scene.patches)
                .map_err(ctx)?;
            let img_data = g.data(img).to_vec();
            let mut views = Vec::with_capacity(N_VIEWS);
            for view in &pair.sparse_views {
                let mut g = Graph::new();
                let mut b = Binder::all_frozen();
                let emb = match branch {
                    TextBranch::Dense => model.embed_dense(&mut g, &mut b, params, view),
                    TextBranch::Sparse => model
                        .sparse_branch(&mut g, &mut b, params, view)
                        .map(|rec| rec.t_hat),
                }
                .map_err(ctx)?;
                views.push(g.data(emb).to_vec());
            }
            Ok((img_data, views))
        })
        .collect();

    let mut images = Vec::with_capacity(scenes.len());
    let mut texts = Vec::with_capacity(scenes.len() * N_VIEWS);
    for r in per_scene {
        let (img, views) = r?;
        images.push(img);
        texts.extend(views);
    }
    Ok((images, texts))
}

/// Ground truth for the 5-views-per-image protocol.
fn multi_view_ground_truth(n_scenes: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let i2t = (0..n_scenes)
        .map(|i| (i * N_VIEWS..(i + 1) * N_VIEWS).collect())
        .collect();
    let t2i = (0..n_scenes * N_VIEWS).map(|j| vec![j / N_VIEWS]).collect();
    (i2t, t2i)
}

fn report_for(
    s: &SimilarityMatrix,
    i2t: &[Vec<usize>],
    t2i: &[Vec<usize>],
    split: SplitMeta,
    model_checksum: String,
) -> Result<RetrievalReport> {
    let mut tr = [0.0; 3];
    let mut ir = [0.0; 3];
    for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
        tr[slot] = recall_at_k(s, i2t, k, Direction::ImageToText)?;
        ir[slot] = recall_at_k(s, t2i, k, Direction::TextToImage)?;
    }
    let report = RetrievalReport::assemble(tr, ir, split, model_checksum);
    report.validate()?;
    Ok(report)
}

/// Embed a split and score both retrieval directions at K = 1, 5, 10.
///
/// Deterministic: same checkpoint and split give a bit-identical report.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    scenes: &[ScenePair],
    branch: TextBranch,
    split_name: &str,
) -> Result<RetrievalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptySequence { op: "evaluate" });
    }
    let (images, texts) = embed_split(model, params, scenes, branch)?;
    let s = SimilarityMatrix::from_embeddings(&images, &texts)?;
    let (i2t, t2i) = multi_view_ground_truth(scenes.len());
    report_for(
        &s,
        &i2t,
        &t2i,
        SplitMeta {
            name: split_name.to_string(),
            n_images: images.len(),
            n_texts: texts.len(),
        },
        params.checksum(""),
    )
}

/// Split the scenes into `n_folds` contiguous folds, evaluate each, and
/// average every metric (the 5-fold 1K protocol).
pub fn evaluate_mean_over_folds(
    model: &Model,
    params: &ParamSet,
    scenes: &[ScenePair],
    branch: TextBranch,
    split_name: &str,
    n_folds: usize,
) -> Result<RetrievalReport> {
    if n_folds == 0 || scenes.len() % n_folds != 0 {
        return Err(Error::Config(format!(
            "{} scenes do not divide into {} folds",
            scenes.len(),
            n_folds
        )));
    }
    let fold_len = scenes.len() / n_folds;
    let mut tr = [0.0; 3];
    let mut ir = [0.0; 3];
    for f in 0..n_folds {
        let fold = &scenes[f * fold_len..(f + 1) * fold_len];
        let r = evaluate(model, params, fold, branch, &format!("{}-fold{}", split_name, f))?;
        for (slot, v) in [r.tr_r1, r.tr_r5, r.tr_r10].into_iter().enumerate() {
            tr[slot] += v / n_folds as f64;
        }
        for (slot, v) in [r.ir_r1, r.ir_r5, r.ir_r10].into_iter().enumerate() {
            ir[slot] += v / n_folds as f64;
        }
    }
    Ok(RetrievalReport::assemble(
        tr,
        ir,
        SplitMeta {
            name: format!("{} (mean of {} folds)", split_name, n_folds),
            n_images: scenes.len(),
            n_texts: scenes.len() * N_VIEWS,
        },
        params.checksum(""),
    ))
}

/// Image <-> dense-caption retrieval with one caption per image; used for
/// stage-1 validation where no sparse branch exists yet.
pub fn evaluate_dense_retrieval(
    model: &Model,
    params: &ParamSet,
    scenes: &[ScenePair],
    split_name: &str,
) -> Result<RetrievalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptySequence { op: "evaluate" });
    }
    let per_scene: Vec<Result<(Vec<f64>, Vec<f64>)>> = scenes
        .par_iter()
        .map(|pair| {
            let mut g = Graph::new();
            let mut b = Binder::all_frozen();
            let img = model.embed_image(&mut g, &mut b, params, &pair.scene.patches)?;
            let txt = model.embed_dense(&mut g, &mut b, params, &pair.dense_tokens)?;
            Ok((g.data(img).to_vec(), g.data(txt).to_vec()))
        })
        .collect();
    let mut images = Vec::with_capacity(scenes.len());
    let mut texts = Vec::with_capacity(scenes.len());
    for r in per_scene {
        let (i, t) = r?;
        images.push(i);
        texts.push(t);
    }
    let s = SimilarityMatrix::from_embeddings(&images, &texts)?;
    let gt: Vec<Vec<usize>> = (0..scenes.len()).map(|i| vec![i]).collect();
    report_for(
        &s,
        &gt,
        &gt,
        SplitMeta {
            name: split_name.to_string(),
            n_images: images.len(),
            n_texts: texts.len(),
        },
        params.checksum(""),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            rows,
            cols,
            values,
            diagonal_positive: rows == cols,
        }
    }

    #[test]
    fn diagonal_dominant_perfect_r1() {
        let s = matrix(
            3,
            3,
            vec![0.9, 0.1, 0.2, 0.0, 0.8, 0.1, 0.3, 0.2, 0.7],
        );
        let gt: Vec<Vec<usize>> = (0..3).map(|i| vec![i]).collect();
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            assert_eq!(recall_at_k(&s, &gt, 1, dir).unwrap(), 100.0);
        }
    }

    #[test]
    fn second_rank_counts_for_r5_not_r1() {
        // query 0's relevant item ranks second in a 5-item row
        let mut values = vec![0.0; 25];
        values[0 * 5 + 3] = 0.9; // best
        values[0 * 5 + 0] = 0.8; // relevant, rank 2
        for q in 1..5 {
            values[q * 5 + q] = 1.0;
        }
        let s = matrix(5, 5, values);
        let gt: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let r1 = recall_at_k(&s, &gt, 1, Direction::ImageToText).unwrap();
        let r5 = recall_at_k(&s, &gt, 5, Direction::ImageToText).unwrap();
        assert_eq!(r1, 80.0);
        assert_eq!(r5, 100.0);
        // oracle agrees on both
        assert_eq!(ranking_oracle(&s, &gt, 1, Direction::ImageToText).unwrap(), r1);
        assert_eq!(ranking_oracle(&s, &gt, 5, Direction::ImageToText).unwrap(), r5);
    }

    #[test]
    fn published_row_sums_exactly() {
        let report = RetrievalReport::assemble(
            [82.8, 96.1, 98.3],
            [68.5, 91.3, 94.9],
            SplitMeta {
                name: "reference".into(),
                n_images: 1000,
                n_texts: 5000,
            },
            String::new(),
        );
        assert!((report.rsum - 531.9).abs() < 1e-9);
        report.validate().unwrap();
    }

    #[test]
    fn oracle_equals_fast_path_on_random_and_tied_matrices() {
        let mut rng = StdRng::seed_from_u64(50);
        for trial in 0..200 {
            let rows = rng.gen_range(2..=24);
            let cols = rng.gen_range(2..=24);
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    if trial % 2 == 0 {
                        // coarse grid: plenty of ties
                        (rng.gen_range(-3i32..=3) as f64) / 3.0
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect();
            let s = matrix(rows, cols, values);
            let i2t: Vec<Vec<usize>> = (0..rows).map(|_| vec![rng.gen_range(0..cols)]).collect();
            let t2i: Vec<Vec<usize>> = (0..cols).map(|_| vec![rng.gen_range(0..rows)]).collect();
            for k in [1, 2, cols.min(5)] {
                assert_eq!(
                    recall_at_k(&s, &i2t, k, Direction::ImageToText).unwrap(),
                    ranking_oracle(&s, &i2t, k, Direction::ImageToText).unwrap()
                );
            }
            for k in [1, 2, rows.min(5)] {
                assert_eq!(
                    recall_at_k(&s, &t2i, k, Direction::TextToImage).unwrap(),
                    ranking_oracle(&s, &t2i, k, Direction::TextToImage).unwrap()
                );
            }
        }
    }

    #[test]
    fn all_equal_similarities_tie_break_identically() {
        let s = matrix(4, 4, vec![0.5; 16]);
        let gt: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        for k in 1..=4 {
            for dir in [Direction::ImageToText, Direction::TextToImage] {
                assert_eq!(
                    recall_at_k(&s, &gt, k, dir).unwrap(),
                    ranking_oracle(&s, &gt, k, dir).unwrap()
                );
            }
        }
        // with all-equal scores, top-k is items 0..k; query i hits iff i < k
        assert_eq!(recall_at_k(&s, &gt, 2, Direction::ImageToText).unwrap(), 50.0);
    }

    #[test]
    fn saturation_at_full_k() {
        let mut rng = StdRng::seed_from_u64(51);
        let values: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = matrix(3, 4, values);
        let gt: Vec<Vec<usize>> = (0..3).map(|_| vec![rng.gen_range(0..4)]).collect();
        assert_eq!(recall_at_k(&s, &gt, 4, Direction::ImageToText).unwrap(), 100.0);
        assert_eq!(ranking_oracle(&s, &gt, 4, Direction::ImageToText).unwrap(), 100.0);
    }

    #[test]
    fn argument_errors() {
        let s = matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let gt = vec![vec![0], vec![1]];
        assert!(recall_at_k(&s, &gt, 0, Direction::ImageToText).is_err());
        assert!(recall_at_k(&s, &gt, 3, Direction::ImageToText).is_err());
        let empty_gt = vec![vec![0], vec![]];
        assert!(recall_at_k(&s, &empty_gt, 1, Direction::ImageToText).is_err());
    }

    #[test]
    fn monotone_in_k_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(52);
        for _ in 0..50 {
            let n = rng.gen_range(10..=30);
            let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = matrix(n, n, values);
            let gt: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..n)]).collect();
            let r1 = recall_at_k(&s, &gt, 1, Direction::ImageToText).unwrap();
            let r5 = recall_at_k(&s, &gt, 5, Direction::ImageToText).unwrap();
            let r10 = recall_at_k(&s, &gt, 10, Direction::ImageToText).unwrap();
            assert!(r1 <= r5 && r5 <= r10);
        }
    }

    #[test]
    fn perfect_one_hot_embeddings_reach_ceiling() {
        // oracle embeddings: image i and all its views map to basis vector i
        let n = 12;
        let images: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            })
            .collect();
        let texts: Vec<Vec<f64>> = (0..n * N_VIEWS).map(|j| images[j / N_VIEWS].clone()).collect();
        let s = SimilarityMatrix::from_embeddings(&images, &texts).unwrap();
        let (i2t, t2i) = multi_view_ground_truth(n);
        let report = report_for(
            &s,
            &i2t,
            &t2i,
            SplitMeta {
                name: "oracle".into(),
                n_images: n,
                n_texts: n * N_VIEWS,
            },
            String::new(),
        )
        .unwrap();
        assert_eq!(report.rsum, 600.0);
    }
}
