//! Shared pre-norm Transformer stack.
//!
//! Used by all three encoders and the reconstruction decoder. Attention is
//! full bidirectional self-attention (no causal mask); feed-forward hidden
//! width is `4 * model_dim`.

use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::Result;
use crate::params::{xavier_uniform, Binder, Param, ParamSet};

#[derive(Debug, Clone, Copy)]
pub(crate) struct StackDims {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

pub(crate) fn init_stack(rng: &mut impl Rng, set: &mut ParamSet, prefix: &str, dims: StackDims) {
    let dm = dims.model_dim;
    let hidden = 4 * dm;
    for l in 0..dims.n_layers {
        let p = format!("{}.l{}", prefix, l);
        for ln in ["ln1", "ln2"] {
            set.insert(format!("{}.{}.g", p, ln), Param::new(vec![dm], vec![1.0; dm]));
            set.insert(format!("{}.{}.b", p, ln), Param::zeros(vec![dm]));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            set.insert(
                format!("{}.attn.{}", p, w),
                Param::new(vec![dm, dm], xavier_uniform(rng, dm, dm)),
            );
        }
        for b in ["bq", "bk", "bv", "bo"] {
            set.insert(format!("{}.attn.{}", p, b), Param::zeros(vec![dm]));
        }
        set.insert(
            format!("{}.ffn.w1", p),
            Param::new(vec![dm, hidden], xavier_uniform(rng, dm, hidden)),
        );
        set.insert(format!("{}.ffn.b1", p), Param::zeros(vec![hidden]));
        set.insert(
            format!("{}.ffn.w2", p),
            Param::new(vec![hidden, dm], xavier_uniform(rng, hidden, dm)),
        );
        set.insert(format!("{}.ffn.b2", p), Param::zeros(vec![dm]));
    }
    set.insert(format!("{}.lnf.g", prefix), Param::new(vec![dm], vec![1.0; dm]));
    set.insert(format!("{}.lnf.b", prefix), Param::zeros(vec![dm]));
}

/// Layer norm followed by learned gain and bias.
fn affine_ln(
    g: &mut Graph,
    binder: &mut Binder,
    set: &ParamSet,
    name: &str,
    x: Tensor,
) -> Result<Tensor> {
    let normed = g.layer_norm(x)?;
    let gain = binder.bind(g, set, &format!("{}.g", name));
    let bias = binder.bind(g, set, &format!("{}.b", name));
    let scaled = g.broadcast_mul_row(normed, gain)?;
    g.broadcast_add_row(scaled, bias)
}

fn linear(
    g: &mut Graph,
    binder: &mut Binder,
    set: &ParamSet,
    w_name: &str,
    b_name: &str,
    x: Tensor,
) -> Result<Tensor> {
    let w = binder.bind(g, set, w_name);
    let b = binder.bind(g, set, b_name);
    let y = g.matmul(x, w)?;
    g.broadcast_add_row(y, b)
}

fn attention(
    g: &mut Graph,
    binder: &mut Binder,
    set: &ParamSet,
    prefix: &str,
    x: Tensor,
    dims: StackDims,
) -> Result<Tensor> {
    let dm = dims.model_dim;
    let head_dim = dm / dims.n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = linear(g, binder, set, &format!("{}.wq", prefix), &format!("{}.bq", prefix), x)?;
    let k = linear(g, binder, set, &format!("{}.wk", prefix), &format!("{}.bk", prefix), x)?;
    let v = linear(g, binder, set, &format!("{}.wv", prefix), &format!("{}.bv", prefix), x)?;

    let mut heads = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let start = h * head_dim;
        let qh = g.slice_cols(q, start, head_dim)?;
        let kh = g.slice_cols(k, start, head_dim)?;
        let vh = g.slice_cols(v, start, head_dim)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scores = g.scalar_mul(raw, scale);
        let attn = g.softmax_lastdim(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat_along_axis(&heads, 1)?;
    linear(g, binder, set, &format!("{}.wo", prefix), &format!("{}.bo", prefix), ctx)
}

/// Run the full stack on a `[seq_len, model_dim]` input; applies the final
/// layer norm before returning.
pub(crate) fn stack_forward(
    g: &mut Graph,
    binder: &mut Binder,
    set: &ParamSet,
    prefix: &str,
    x: Tensor,
    dims: StackDims,
) -> Result<Tensor> {
    let mut h = x;
    for l in 0..dims.n_layers {
        let p = format!("{}.l{}", prefix, l);
        let a_in = affine_ln(g, binder, set, &format!("{}.ln1", p), h)?;
        let attn = attention(g, binder, set, &format!("{}.attn", p), a_in, dims)?;
        h = g.add(h, attn)?;

        let f_in = affine_ln(g, binder, set, &format!("{}.ln2", p), h)?;
        let mid = linear(g, binder, set, &format!("{}.ffn.w1", p), &format!("{}.ffn.b1", p), f_in)?;
        let act = g.gelu(mid);
        let out = linear(g, binder, set, &format!("{}.ffn.w2", p), &format!("{}.ffn.b2", p), act)?;
        h = g.add(h, out)?;
    }
    affine_ln(g, binder, set, &format!("{}.lnf", prefix), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamSet, StackDims) {
        let dims = StackDims {
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
        };
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_stack(&mut rng, &mut set, "t", dims);
        (set, dims)
    }

    #[test]
    fn stack_preserves_shape() {
        let (set, dims) = tiny();
        let mut g = Graph::new();
        let mut b = Binder::all_frozen();
        let x = g.leaf((0..24).map(|i| (i as f64) * 0.1 - 1.2).collect(), vec![3, 8], false);
        let y = stack_forward(&mut g, &mut b, &set, "t", x, dims).unwrap();
        assert_eq!(g.shape(y), &[3, 8]);
        assert!(g.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let (set, dims) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let point: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = crate::autodiff::grad_check(
            |g, x| {
                let mut b = Binder::all_frozen();
                let y = stack_forward(g, &mut b, &set, "t", x, dims)?;
                Ok(g.sum(y))
            },
            &point,
            &[2, 8],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }
}
