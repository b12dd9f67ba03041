use crate::error::{Error, Result};

use super::LAYER_NORM_EPS;

/// Handle to a tensor stored in a [`Graph`].
///
/// Handles are only meaningful for the graph that created them.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

/// Recorded operation. Input handles live inside each variant; constants and
/// index metadata are captured at record time.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    ScalarMul { x: Tensor, c: f64 },
    AddConst { x: Tensor, c: f64 },
    Hadamard { a: Tensor, b: Tensor },
    MulScalar { x: Tensor, s: Tensor },
    Recip { x: Tensor },
    SoftmaxLastDim { x: Tensor },
    LayerNorm { x: Tensor },
    Gelu { x: Tensor },
    Relu { x: Tensor },
    Abs { x: Tensor },
    MeanOverAxis { x: Tensor, axis: usize },
    Sum { x: Tensor },
    Dot { a: Tensor, b: Tensor },
    L2Norm { x: Tensor },
    Concat { inputs: Vec<Tensor>, axis: usize },
    Transpose { x: Tensor },
    SliceCols { x: Tensor, start: usize, len: usize },
    SliceRows { x: Tensor, start: usize, len: usize },
    GatherRows { x: Tensor, indices: Vec<usize> },
    BroadcastAddRow { x: Tensor, row: Tensor },
    BroadcastMulRow { x: Tensor, row: Tensor },
    Reshape { x: Tensor },
    Index2d { x: Tensor, r: usize, c: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Define-by-run computation graph.
///
/// Nodes are appended in forward order, which is a topological order by
/// construction; `backward` walks the list in reverse and visits each node
/// exactly once. A graph and its tensors are confined to one thread;
/// independent graphs may run on separate threads.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        Tensor(id)
    }

    /// Insert a leaf tensor. `requires_grad` leaves receive gradients on
    /// `backward`; constant leaves do not.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "leaf: shape {:?} does not hold {} values",
            shape,
            data.len()
        );
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    /// Constant scalar (shape `[]`).
    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    /// Value of a scalar tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient populated by the most recent `backward`, if this tensor was
    /// reachable from the root.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn any_requires(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    fn rank2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidArgument {
                op,
                msg: format!("expected a rank-2 tensor, got shape {:?}", s),
            }),
        }
    }

    // ---- forward ops ---------------------------------------------------

    /// `[m,k] @ [k,n] -> [m,n]`, row-major.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, ka, n);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, req))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product of same-shaped tensors.
    pub fn hadamard(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_elementwise(a, b, "hadamard", |x, y| x * y, |a, b| Op::Hadamard { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: Tensor,
        b: Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.any_requires(&[a, b]);
        Ok(self.push(op(a, b), shape, data, req))
    }

    /// Multiply by a compile-time constant.
    pub fn scalar_mul(&mut self, x: Tensor, c: f64) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::ScalarMul { x, c }, shape, data, req)
    }

    /// Add a compile-time constant elementwise.
    pub fn add_const(&mut self, x: Tensor, c: f64) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::AddConst { x, c }, shape, data, req)
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        if self.data(s).len() != 1 {
            return Err(Error::InvalidArgument {
                op: "mul_scalar",
                msg: format!("scale must hold one value, got shape {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let req = self.any_requires(&[x, s]);
        Ok(self.push(Op::MulScalar { x, s }, shape, data, req))
    }

    /// Reciprocal of a single-element tensor. Caller guards against zero.
    pub fn recip(&mut self, x: Tensor) -> Result<Tensor> {
        if self.data(x).len() != 1 {
            return Err(Error::InvalidArgument {
                op: "recip",
                msg: format!("expected one value, got shape {:?}", self.shape(x)),
            });
        }
        let v = self.data(x)[0];
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Recip { x }, shape, vec![1.0 / v], req))
    }

    /// Softmax over the last dimension of a rank-1 or rank-2 tensor.
    ///
    /// `-inf` entries receive weight exactly 0, which is the masking
    /// mechanism used by the pooling layer. A row of all `-inf` is outside
    /// the domain.
    pub fn softmax_lastdim(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.last_dim_rows(x, "softmax_lastdim")?;
        let mut data = self.data(x).to_vec();
        for r in 0..rows {
            softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SoftmaxLastDim { x }, shape, data, req))
    }

    /// Normalize over the last dimension: `(x - mean) / sqrt(var + eps)`,
    /// without affine terms (apply `broadcast_mul_row`/`broadcast_add_row`
    /// for gain and bias). Constant rows map to zeros.
    pub fn layer_norm(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.last_dim_rows(x, "layer_norm")?;
        if cols == 0 {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                msg: "last dimension must have extent >= 1".into(),
            });
        }
        let mut data = self.data(x).to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::LayerNorm { x }, shape, data, req))
    }

    /// Gaussian error linear unit (tanh form).
    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_val(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::Gelu { x }, shape, data, req)
    }

    /// Hinge `[x]_+`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::Relu { x }, shape, data, req)
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Tensor) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::Abs { x }, shape, data, req)
    }

    /// Mean of a rank-2 tensor along `axis` (0: over rows, 1: over cols).
    pub fn mean_over_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "mean_over_axis")?;
        let xd = self.data(x);
        let (out, shape) = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += xd[i * c + j];
                    }
                }
                for v in &mut out {
                    *v /= r as f64;
                }
                (out, vec![c])
            }
            1 => {
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = xd[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                }
                (out, vec![r])
            }
            _ => {
                return Err(Error::InvalidArgument {
                    op: "mean_over_axis",
                    msg: format!("axis {} out of range for rank 2", axis),
                })
            }
        };
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MeanOverAxis { x, axis }, shape, out, req))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s = self.data(x).iter().sum::<f64>();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::Sum { x }, vec![], vec![s], req)
    }

    /// Inner product of two rank-1 tensors of equal length.
    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let req = self.any_requires(&[a, b]);
        Ok(self.push(Op::Dot { a, b }, vec![], vec![s], req))
    }

    /// Euclidean norm of all elements, as a scalar. The norm of the zero
    /// tensor is 0; dividing by it is the caller's error to raise.
    pub fn l2_norm(&mut self, x: Tensor) -> Tensor {
        let s = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let req = self.nodes[x.0].requires_grad;
        self.push(Op::L2Norm { x }, vec![], vec![s], req)
    }

    /// Concatenate rank-1 tensors (axis 0) or rank-2 tensors along `axis`.
    pub fn concat_along_axis(&mut self, inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence {
                op: "concat_along_axis",
            });
        }
        let rank = self.shape(inputs[0]).len();
        let (data, shape) = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &t in inputs {
                    if self.shape(t).len() != 1 {
                        return Err(Error::ShapeMismatch {
                            op: "concat_along_axis",
                            lhs: self.shape(inputs[0]).to_vec(),
                            rhs: self.shape(t).to_vec(),
                        });
                    }
                    data.extend_from_slice(self.data(t));
                }
                let n = data.len();
                (data, vec![n])
            }
            (2, 0) => {
                let (_, c0) = self.rank2(inputs[0], "concat_along_axis")?;
                let mut rows = 0;
                let mut data = Vec::new();
                for &t in inputs {
                    let (r, c) = self.rank2(t, "concat_along_axis")?;
                    if c != c0 {
                        return Err(Error::ShapeMismatch {
                            op: "concat_along_axis",
                            lhs: self.shape(inputs[0]).to_vec(),
                            rhs: self.shape(t).to_vec(),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(self.data(t));
                }
                (data, vec![rows, c0])
            }
            (2, 1) => {
                let (r0, _) = self.rank2(inputs[0], "concat_along_axis")?;
                let mut total_cols = 0;
                for &t in inputs {
                    let (r, c) = self.rank2(t, "concat_along_axis")?;
                    if r != r0 {
                        return Err(Error::ShapeMismatch {
                            op: "concat_along_axis",
                            lhs: self.shape(inputs[0]).to_vec(),
                            rhs: self.shape(t).to_vec(),
                        });
                    }
                    total_cols += c;
                }
                let mut data = vec![0.0; r0 * total_cols];
                let mut col_off = 0;
                for &t in inputs {
                    let (_, c) = self.rank2(t, "concat_along_axis")?;
                    let td = self.data(t);
                    for i in 0..r0 {
                        data[i * total_cols + col_off..i * total_cols + col_off + c]
                            .copy_from_slice(&td[i * c..(i + 1) * c]);
                    }
                    col_off += c;
                }
                (data, vec![r0, total_cols])
            }
            _ => {
                return Err(Error::InvalidArgument {
                    op: "concat_along_axis",
                    msg: format!("unsupported rank {} / axis {}", rank, axis),
                })
            }
        };
        let req = self.any_requires(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            data,
            req,
        ))
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "transpose")?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Transpose { x }, vec![c, r], out, req))
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {}..{} out of range for width {}", start, start + len, c),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SliceCols { x, start, len }, vec![r, len], out, req))
    }

    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {}..{} out of range for height {}", start, start + len, r),
            });
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, c], out, req))
    }

    /// Gather rows of a rank-2 tensor by index (rows may repeat). Backward
    /// scatter-adds, so this doubles as the embedding lookup.
    pub fn gather_rows(&mut self, x: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::EmptySequence { op: "gather_rows" });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {} out of range for height {}", bad, r),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            vec![indices.len(), c],
            out,
            req,
        ))
    }

    /// Add a rank-1 `row` to every row of a rank-2 tensor.
    pub fn broadcast_add_row(&mut self, x: Tensor, row: Tensor) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "broadcast_add_row")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rd = self.data(row).to_vec();
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rd[j];
            }
        }
        let req = self.any_requires(&[x, row]);
        Ok(self.push(Op::BroadcastAddRow { x, row }, vec![r, c], out, req))
    }

    /// Multiply every row of a rank-2 tensor elementwise by a rank-1 `row`.
    pub fn broadcast_mul_row(&mut self, x: Tensor, row: Tensor) -> Result<Tensor> {
        let (r, c) = self.rank2(x, "broadcast_mul_row")?;
        if self.shape(row) != [c] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_mul_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rd = self.data(row).to_vec();
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= rd[j];
            }
        }
        let req = self.any_requires(&[x, row]);
        Ok(self.push(Op::BroadcastMulRow { x, row }, vec![r, c], out, req))
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.data(x).len() {
            return Err(Error::InvalidArgument {
                op: "reshape",
                msg: format!(
                    "cannot view {} elements as shape {:?}",
                    self.data(x).len(),
                    shape
                ),
            });
        }
        let data = self.data(x).to_vec();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape { x }, shape, data, req))
    }

    /// Extract element `(r, c)` of a rank-2 tensor as a scalar.
    pub fn index2d(&mut self, x: Tensor, r: usize, c: usize) -> Result<Tensor> {
        let (rows, cols) = self.rank2(x, "index2d")?;
        if r >= rows || c >= cols {
            return Err(Error::InvalidArgument {
                op: "index2d",
                msg: format!("({}, {}) out of range for [{}, {}]", r, c, rows, cols),
            });
        }
        let v = self.data(x)[r * cols + c];
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Index2d { x, r, c }, vec![], vec![v], req))
    }

    /// `x / ||x||`, erroring on the zero vector.
    pub fn l2_normalize(&mut self, x: Tensor) -> Result<Tensor> {
        let norm = self.l2_norm(x);
        if self.value(norm) == 0.0 {
            return Err(Error::ZeroVector { op: "l2_normalize" });
        }
        let inv = self.recip(norm)?;
        self.mul_scalar(x, inv)
    }

    fn last_dim_rows(&self, x: Tensor, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidArgument {
                op,
                msg: format!("expected rank 1 or 2, got shape {:?}", s),
            }),
        }
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar root.
    ///
    /// Populates `grad` for every `requires_grad` tensor reachable from the
    /// root. Interior gradients are recomputed per call; leaf gradients
    /// accumulate across calls.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.data(root).len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }

        // Active set: requires-grad nodes reachable from the root.
        let mut active = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if active[i] {
                continue;
            }
            active[i] = true;
            for inp in op_inputs(&self.nodes[i].op) {
                if self.nodes[inp.0].requires_grad && !active[inp.0] {
                    stack.push(inp.0);
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            match &mut node.grad {
                Some(g) if !is_leaf => g.iter_mut().for_each(|v| *v = 0.0),
                Some(_) => {}
                None => node.grad = Some(vec![0.0; node.data.len()]),
            }
        }
        self.nodes[root.0].grad.as_mut().unwrap()[0] += 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !active[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let dout = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_op(i, &op, &dout);
        }
        Ok(())
    }

    fn accumulate(&mut self, t: Tensor, contrib: &[f64]) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let g = self.nodes[t.0]
            .grad
            .as_mut()
            .expect("active node must have a grad buffer");
        debug_assert_eq!(g.len(), contrib.len());
        for (gv, cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    fn backward_op(&mut self, out_id: usize, op: &Op, dout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // dA[i,p] = sum_j dout[i,j] * B[p,j]  (dOut @ B^T)
                    let bd = self.data(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dout[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    // dB[p,j] = sum_i A[i,p] * dout[i,j]
                    let ad = self.data(*a).to_vec();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * n..(p + 1) * n];
                            let src = &dout[i * n..(i + 1) * n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += av * s;
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dout);
                self.accumulate(*b, dout);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, dout);
                let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::ScalarMul { x, c } => {
                let dx: Vec<f64> = dout.iter().map(|v| v * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::AddConst { x, .. } => {
                self.accumulate(*x, dout);
            }
            Op::Hadamard { a, b } => {
                if self.requires_grad(*a) {
                    let da: Vec<f64> = dout.iter().zip(self.data(*b)).map(|(d, v)| d * v).collect();
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = dout.iter().zip(self.data(*a)).map(|(d, v)| d * v).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                if self.requires_grad(*x) {
                    let dx: Vec<f64> = dout.iter().map(|v| v * sv).collect();
                    self.accumulate(*x, &dx);
                }
                if self.requires_grad(*s) {
                    let ds: f64 = dout.iter().zip(self.data(*x)).map(|(d, v)| d * v).sum();
                    self.accumulate(*s, &[ds]);
                }
            }
            Op::Recip { x } => {
                let v = self.data(*x)[0];
                self.accumulate(*x, &[-dout[0] / (v * v)]);
            }
            Op::SoftmaxLastDim { x } => {
                let (rows, cols) = self.last_dim_rows(*x, "softmax_lastdim").unwrap();
                let s = self.data(Tensor(out_id)).to_vec();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let drow = &dout[r * cols..(r + 1) * cols];
                    let inner: f64 = srow.iter().zip(drow).map(|(sv, dv)| sv * dv).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = srow[j] * (drow[j] - inner);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x } => {
                let (rows, cols) = self.last_dim_rows(*x, "layer_norm").unwrap();
                let n = cols as f64;
                let xd = self.data(*x).to_vec();
                let y = self.data(Tensor(out_id)).to_vec();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xrow = &xd[r * cols..(r + 1) * cols];
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let drow = &dout[r * cols..(r + 1) * cols];
                    let mean = xrow.iter().sum::<f64>() / n;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mean_d = drow.iter().sum::<f64>() / n;
                    let mean_dy: f64 = drow.iter().zip(yrow).map(|(d, yv)| d * yv).sum::<f64>() / n;
                    for j in 0..cols {
                        dx[r * cols + j] = inv * (drow[j] - mean_d - yrow[j] * mean_dy);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*x))
                    .map(|(d, &v)| d * gelu_deriv(v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*x))
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.data(*x))
                    .map(|(d, &v)| {
                        if v > 0.0 {
                            *d
                        } else if v < 0.0 {
                            -*d
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::MeanOverAxis { x, axis } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                match axis {
                    0 => {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = dout[j] / r as f64;
                            }
                        }
                    }
                    _ => {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = dout[i] / c as f64;
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![dout[0]; self.data(*x).len()];
                self.accumulate(*x, &dx);
            }
            Op::Dot { a, b } => {
                if self.requires_grad(*a) {
                    let da: Vec<f64> = self.data(*b).iter().map(|v| v * dout[0]).collect();
                    self.accumulate(*a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = self.data(*a).iter().map(|v| v * dout[0]).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::L2Norm { x } => {
                let norm = self.data(Tensor(out_id))[0];
                let dx: Vec<f64> = if norm == 0.0 {
                    vec![0.0; self.data(*x).len()]
                } else {
                    self.data(*x).iter().map(|v| dout[0] * v / norm).collect()
                };
                self.accumulate(*x, &dx);
            }
            Op::Concat { inputs, axis } => {
                let rank = self.shape(inputs[0]).len();
                match (rank, axis) {
                    (1, _) | (2, 0) => {
                        let mut off = 0;
                        for &t in inputs {
                            let len = self.data(t).len();
                            let piece = dout[off..off + len].to_vec();
                            self.accumulate(t, &piece);
                            off += len;
                        }
                    }
                    _ => {
                        let total_cols = self.shape(Tensor(out_id))[1];
                        let rows = self.shape(Tensor(out_id))[0];
                        let mut col_off = 0;
                        for &t in inputs {
                            let c = self.shape(t)[1];
                            let mut piece = vec![0.0; rows * c];
                            for i in 0..rows {
                                piece[i * c..(i + 1) * c].copy_from_slice(
                                    &dout[i * total_cols + col_off..i * total_cols + col_off + c],
                                );
                            }
                            self.accumulate(t, &piece);
                            col_off += c;
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dout[j * r + i];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&dout[i * len..(i + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::SliceRows { x, start, .. } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + dout.len()].copy_from_slice(dout);
                self.accumulate(*x, &dx);
            }
            Op::GatherRows { x, indices } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for (pos, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += dout[pos * c + j];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::BroadcastAddRow { x, row } => {
                self.accumulate(*x, dout);
                if self.requires_grad(*row) {
                    let c = self.shape(*row)[0];
                    let mut dr = vec![0.0; c];
                    for (pos, d) in dout.iter().enumerate() {
                        dr[pos % c] += d;
                    }
                    self.accumulate(*row, &dr);
                }
            }
            Op::BroadcastMulRow { x, row } => {
                let c = self.shape(*row)[0];
                if self.requires_grad(*x) {
                    let rd = self.data(*row).to_vec();
                    let dx: Vec<f64> = dout
                        .iter()
                        .enumerate()
                        .map(|(pos, d)| d * rd[pos % c])
                        .collect();
                    self.accumulate(*x, &dx);
                }
                if self.requires_grad(*row) {
                    let xd = self.data(*x);
                    let mut dr = vec![0.0; c];
                    for (pos, d) in dout.iter().enumerate() {
                        dr[pos % c] += d * xd[pos];
                    }
                    self.accumulate(*row, &dr);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(*x, dout);
            }
            Op::Index2d { x, r, c } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; self.data(*x).len()];
                dx[r * cols + c] = dout[0];
                self.accumulate(*x, &dx);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Hadamard { a, b }
        | Op::Dot { a, b } => vec![*a, *b],
        Op::MulScalar { x, s } => vec![*x, *s],
        Op::BroadcastAddRow { x, row } | Op::BroadcastMulRow { x, row } => vec![*x, *row],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::ScalarMul { x, .. }
        | Op::AddConst { x, .. }
        | Op::Recip { x }
        | Op::SoftmaxLastDim { x }
        | Op::LayerNorm { x }
        | Op::Gelu { x }
        | Op::Relu { x }
        | Op::Abs { x }
        | Op::MeanOverAxis { x, .. }
        | Op::Sum { x }
        | Op::L2Norm { x }
        | Op::Transpose { x }
        | Op::SliceCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::GatherRows { x, .. }
        | Op::Reshape { x }
        | Op::Index2d { x, .. } => vec![*x],
    }
}

/// Row-major `out[m,n] = a[m,k] @ b[k,n]`, ikj order for cache locality.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let b = g.leaf(vec![1.0, 1.0], vec![2, 1], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 6], vec![2, 3], false);
        let b = g.leaf(vec![0.0; 4], vec![2, 2], false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0, 0.0, 0.0], vec![3], false);
        let s = g.softmax_lastdim(x).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_neg_inf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.3, f64::NEG_INFINITY, -0.7], vec![3], false);
        let s = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.data(s)[1], 0.0);
        let total: f64 = g.data(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![5.0; 4], vec![4], false);
        let y = g.layer_norm(x).unwrap();
        for v in g.data(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn backward_square_sum() {
        // root = sum(x*x), x=[3] -> grad 2x = [6]
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0], vec![1], true);
        let sq = g.hadamard(x, x).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_dot_is_bilinear() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, -1.0], vec![3], true);
        let b = g.leaf(vec![0.5, -3.0, 4.0], vec![3], true);
        let root = g.dot(a, b).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(a).unwrap(), g.data(b));
        assert_eq!(g.grad(b).unwrap(), g.data(a));
    }

    #[test]
    fn backward_twice_accumulates_on_leaves() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0], vec![1], true);
        let sq = g.hadamard(x, x).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn fanout_gradients_add() {
        // y = sum(x*x) + sum(x) -> dy/dx = 2x + 1, compared against two
        // separately built graphs.
        let point = vec![0.7, -1.3, 2.1];

        let mut g = Graph::new();
        let x = g.leaf(point.clone(), vec![3], true);
        let sq = g.hadamard(x, x).unwrap();
        let s1 = g.sum(sq);
        let s2 = g.sum(x);
        let root = g.add(s1, s2).unwrap();
        g.backward(root).unwrap();
        let combined = g.grad(x).unwrap().to_vec();

        let mut g1 = Graph::new();
        let x1 = g1.leaf(point.clone(), vec![3], true);
        let sq1 = g1.hadamard(x1, x1).unwrap();
        let r1 = g1.sum(sq1);
        g1.backward(r1).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(point.clone(), vec![3], true);
        let r2 = g2.sum(x2);
        g2.backward(r2).unwrap();

        for i in 0..3 {
            let separate = g1.grad(x1).unwrap()[i] + g2.grad(x2).unwrap()[i];
            assert_eq!(combined[i], separate);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6], vec![2, 3], true);
            let n = g.layer_norm(x).unwrap();
            let act = g.gelu(n);
            let s = g.softmax_lastdim(act).unwrap();
            let root = g.sum(s);
            g.backward(root).unwrap();
            (g.data(s).to_vec(), g.grad(x).unwrap().to_vec())
        };
        let (d1, g1) = run();
        let (d2, g2) = run();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn concat_axis1_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true);
        let b = g.leaf(vec![5.0, 6.0], vec![2, 1], true);
        let c = g.concat_along_axis(&[a, b], 1).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut g = Graph::new();
        let table = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true);
        let picked = g.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(g.data(picked), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = g.sum(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
