//! Operation recording and reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate tensor of one forward computation.
//! Operations append nodes and return [`NodeId`] handles; [`Tape::backward`]
//! seeds d(loss)/d(loss) = 1 on a scalar node and walks the nodes in reverse
//! insertion order, accumulating gradients into each node that (transitively)
//! depends on a `requires_grad` leaf. Insertion order is a topological order
//! because an operation can only consume already-existing nodes.
//!
//! Gradients accumulate: calling `backward` twice without `zero_all_grads`
//! doubles every leaf gradient.

use super::gemm::gemm;
use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Resolved matmul geometry, captured at forward time.
#[derive(Clone, Copy, Debug)]
struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// b is [batch, ...] rather than shared across the batch.
    b_batched: bool,
    /// c = a * b^T; b is stored [n, k].
    transpose_b: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, dims: MmDims },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    Concat { parts: Vec<NodeId>, axis: usize },
    Reshape { a: NodeId },
    RepeatPositions { a: NodeId, count: usize },
    Lookup { table: NodeId, rows: Vec<usize> },
    Sigmoid { a: NodeId },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, means: Vec<f64>, inv_stds: Vec<f64> },
    MeanAxis { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    MseLoss { pred: NodeId, target: NodeId },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: n.needs_grad,
            grad: n.grad.clone(),
        }
    }

    /// Copy the node's accumulated gradient into `t.grad`, adding to
    /// whatever is already there.
    pub fn write_back_grad(&self, id: NodeId, t: &mut Tensor) {
        if let Some(g) = self.grad(id) {
            let n = t.numel();
            let dst = t.grad.get_or_insert_with(|| vec![0.0; n]);
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn zero_all_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- node construction -------------------------------------------------

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.values.clone(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        if numel(shape) != values.len() {
            return Err(Error::usage(
                "constant_from",
                format!("shape {:?} vs {} values", shape, values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    // ---- matmul ------------------------------------------------------------

    /// Matrix product. Accepts [m,k]x[k,n], [B,m,k]x[k,n] (shared rhs) and
    /// [B,m,k]x[B,k,n]. With `transpose_b`, the rhs is stored transposed,
    /// i.e. [n,k] / [B,n,k], and c = a * b^T.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        let (batch, m, k) = match ashape.len() {
            2 => (1, ashape[0], ashape[1]),
            3 => (ashape[0], ashape[1], ashape[2]),
            _ => return Err(mismatch()),
        };
        let (b_batched, bk, n) = match bshape.len() {
            2 => (false, bshape[0], bshape[1]),
            3 => (true, bshape[1], bshape[2]),
            _ => return Err(mismatch()),
        };
        let (bk, n) = if transpose_b { (n, bk) } else { (bk, n) };
        if bk != k || (b_batched && (ashape.len() != 3 || bshape[0] != batch)) {
            return Err(mismatch());
        }
        let dims = MmDims {
            batch,
            m,
            k,
            n,
            b_batched,
            transpose_b,
        };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let (rsb, csb) = if transpose_b {
            (1isize, k as isize)
        } else {
            (n as isize, 1isize)
        };
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &av[ao..],
                k as isize,
                1,
                &bv[bo..],
                rsb,
                csb,
                0.0,
                &mut out[bi * m * n..],
            );
        }
        let mut shape = ashape;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, needs, Op::MatMul { a, b, dims }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false)
    }

    /// x * w + b with b broadcast over leading axes.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ---- elementwise binary ------------------------------------------------

    /// Validate leading-axis broadcast: rhs shape must equal a suffix of the
    /// lhs shape. Returns rhs length.
    fn suffix_len(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(numel(sb))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let blen = self.suffix_len("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[i % blen]).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let blen = self.suffix_len("sub", a, b)?;
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x - bv[i % blen]).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let blen = self.suffix_len("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * bv[i % blen]).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, needs, Op::Mul { a, b }))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| -x).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, needs, Op::Neg { a })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, needs, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, needs, Op::MulScalar { a, c })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, needs, Op::Sigmoid { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, needs, Op::Gelu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), out, needs, Op::Exp { a })
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat", "empty part list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::usage(
                "concat",
                format!("axis {} out of range for rank {}", axis, base.len()),
            ));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let pn = &self.nodes[p.0];
                let chunk = pn.shape[axis] * inner;
                out.extend_from_slice(&pn.values[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            shape,
            out,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.nodes[a.0].values.clone();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), values, needs, Op::Reshape { a }))
    }

    /// [B, d] -> [B, count, d]: each row repeated `count` times. Used to
    /// spread a per-sequence vector across sequence positions.
    pub fn repeat_positions(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::usage(
                "repeat_positions",
                format!("expected rank 2 input, got {:?}", s),
            ));
        }
        let (b, d) = (s[0], s[1]);
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(b * count * d);
        for bi in 0..b {
            let row = &av[bi * d..(bi + 1) * d];
            for _ in 0..count {
                out.extend_from_slice(row);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![b, count, d], out, needs, Op::RepeatPositions { a, count }))
    }

    /// Gather rows of a [R, C] table: out[i, :] = table[rows[i], :].
    pub fn lookup(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::usage("lookup", format!("table must be rank 2, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::usage(
                "lookup",
                format!("row index {} out of range for table with {} rows", bad, r),
            ));
        }
        let tv = &self.nodes[table.0].values;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            needs,
            Op::Lookup {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    // ---- reductions and normalizations --------------------------------------

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::usage(
                "softmax",
                format!("axis {} out of range for rank {}", axis, shape.len()),
            ));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(av[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (av[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[at(l)] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, needs, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis with learnable gain and bias
    /// (both shaped [last]). Uses the biased variance, like the usual
    /// formulation.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::usage("layer_norm", "rank 0 input"))?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.shape(id) != [d] {
                return Err(Error::usage(
                    "layer_norm",
                    format!("{} shape {:?} does not match last axis {}", name, self.shape(id), d),
                ));
            }
        }
        let lanes = numel(&shape) / d;
        let av = &self.nodes[a.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0; av.len()];
        let mut means = Vec::with_capacity(lanes);
        let mut inv_stds = Vec::with_capacity(lanes);
        for l in 0..lanes {
            let x = &av[l * d..(l + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[l * d + j] = (x[j] - mean) * inv * gv[j] + bv[j];
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            out,
            needs,
            Op::LayerNorm {
                a,
                gain,
                bias,
                means,
                inv_stds,
            },
        ))
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::usage(
                "mean_axis",
                format!("axis {} out of range for rank {}", axis, shape.len()),
            ));
        }
        let lane = shape[axis];
        if lane == 0 {
            return Err(Error::usage("mean_axis", "mean over empty axis"));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                for i in 0..inner {
                    out[o * inner + i] += av[(o * lane + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= lane as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let needs = self.needs(a);
        Ok(self.push(new_shape, out, needs, Op::MeanAxis { a, axis }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], needs, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(Error::usage("mean_all", "mean of empty tensor"));
        }
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let needs = self.needs(a);
        Ok(self.push(vec![1], vec![s / n as f64], needs, Op::MeanAll { a }))
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let n = self.nodes[pred.0].values.len();
        if n == 0 {
            return Err(Error::usage("mse_loss", "empty operands"));
        }
        let (pv, tv) = (&self.nodes[pred.0].values, &self.nodes[target.0].values);
        let s: f64 = pv.iter().zip(tv).map(|(p, t)| (p - t) * (p - t)).sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(vec![1], vec![s / n as f64], needs, Op::MseLoss { pred, target }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar node. Each call contributes exactly one
    /// unit of d(loss)/d(loss): the traversal runs on per-call buffers and
    /// its results are then added to the persistent node gradients, so
    /// repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::usage(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || local[id].is_none() {
                continue;
            }
            self.step_back(id, &mut local);
        }
        for (node, l) in self.nodes.iter_mut().zip(local) {
            if let Some(l) = l {
                let g = node.grad.get_or_insert_with(|| vec![0.0; l.len()]);
                for (gi, li) in g.iter_mut().zip(&l) {
                    *gi += li;
                }
            }
        }
        Ok(())
    }

    /// Take the output gradient of `id` from the traversal buffers and push
    /// contributions to its inputs' buffers.
    fn step_back(&self, id: usize, local: &mut [Option<Vec<f64>>]) {
        let dc = local[id].take().expect("checked by caller");
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => self.back_matmul(local, a, b, dims, &dc),
            Op::Add { a, b } => {
                self.accumulate_full(local, a, &dc, 1.0);
                self.accumulate_suffix(local, b, &dc, 1.0);
            }
            Op::Sub { a, b } => {
                self.accumulate_full(local, a, &dc, 1.0);
                self.accumulate_suffix(local, b, &dc, -1.0);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let blen = self.nodes[b.0].values.len();
                    let scaled: Vec<f64> = dc
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * self.nodes[b.0].values[i % blen])
                        .collect();
                    self.accumulate_full(local, a, &scaled, 1.0);
                }
                if self.nodes[b.0].needs_grad {
                    let scaled: Vec<f64> = dc
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * self.nodes[a.0].values[i])
                        .collect();
                    self.accumulate_suffix(local, b, &scaled, 1.0);
                }
            }
            Op::Neg { a } => self.accumulate_full(local, a, &dc, -1.0),
            Op::AddScalar { a } => self.accumulate_full(local, a, &dc, 1.0),
            Op::MulScalar { a, c } => self.accumulate_full(local, a, &dc, c),
            Op::Concat { parts, axis } => {
                let shape = self.nodes[id].shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_chunk = shape[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let pchunk = self.nodes[p.0].shape[axis] * inner;
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![0.0; self.nodes[p.0].values.len()];
                        for o in 0..outer {
                            let src = &dc[o * total_chunk + offset..o * total_chunk + offset + pchunk];
                            dp[o * pchunk..(o + 1) * pchunk].copy_from_slice(src);
                        }
                        self.accumulate_full(local, p, &dp, 1.0);
                    }
                    offset += pchunk;
                }
            }
            Op::Reshape { a } => self.accumulate_full(local, a, &dc, 1.0),
            Op::RepeatPositions { a, count } => {
                if self.nodes[a.0].needs_grad {
                    let d = self.nodes[a.0].shape[1];
                    let b = self.nodes[a.0].shape[0];
                    let mut da = vec![0.0; b * d];
                    for bi in 0..b {
                        for r in 0..count {
                            let src = &dc[(bi * count + r) * d..(bi * count + r + 1) * d];
                            for j in 0..d {
                                da[bi * d + j] += src[j];
                            }
                        }
                    }
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::Lookup { table, rows } => {
                if self.nodes[table.0].needs_grad {
                    let c = self.nodes[table.0].shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].values.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dt[r * c + j] += dc[i * c + j];
                        }
                    }
                    self.accumulate_full(local, table, &dt, 1.0);
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[a.0].needs_grad {
                    let y = &self.nodes[id].values;
                    let da: Vec<f64> = dc.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect();
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].needs_grad {
                    let x = &self.nodes[a.0].values;
                    let da: Vec<f64> = dc.iter().zip(x).map(|(d, &x)| d * gelu_deriv(x)).collect();
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::Exp { a } => {
                if self.nodes[a.0].needs_grad {
                    let y = &self.nodes[id].values;
                    let da: Vec<f64> = dc.iter().zip(y).map(|(d, y)| d * y).collect();
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::Softmax { a, axis } => {
                if self.nodes[a.0].needs_grad {
                    let shape = &self.nodes[id].shape;
                    let lane = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let y = &self.nodes[id].values;
                    let mut da = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * lane + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                dot += dc[at(l)] * y[at(l)];
                            }
                            for l in 0..lane {
                                da[at(l)] = y[at(l)] * (dc[at(l)] - dot);
                            }
                        }
                    }
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                means,
                inv_stds,
            } => {
                let d = *self.nodes[id].shape.last().unwrap();
                let lanes = means.len();
                let xs = self.nodes[a.0].values.clone();
                let gv = self.nodes[gain.0].values.clone();
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; d];
                    for l in 0..lanes {
                        for j in 0..d {
                            db[j] += dc[l * d + j];
                        }
                    }
                    self.accumulate_full(local, bias, &db, 1.0);
                }
                if self.nodes[gain.0].needs_grad {
                    let mut dg = vec![0.0; d];
                    for l in 0..lanes {
                        for j in 0..d {
                            let xhat = (xs[l * d + j] - means[l]) * inv_stds[l];
                            dg[j] += dc[l * d + j] * xhat;
                        }
                    }
                    self.accumulate_full(local, gain, &dg, 1.0);
                }
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; xs.len()];
                    for l in 0..lanes {
                        let (mean, inv) = (means[l], inv_stds[l]);
                        let mut sum_gd = 0.0;
                        let mut sum_gdx = 0.0;
                        for j in 0..d {
                            let gd = gv[j] * dc[l * d + j];
                            let xhat = (xs[l * d + j] - mean) * inv;
                            sum_gd += gd;
                            sum_gdx += gd * xhat;
                        }
                        let dn = d as f64;
                        for j in 0..d {
                            let gd = gv[j] * dc[l * d + j];
                            let xhat = (xs[l * d + j] - mean) * inv;
                            da[l * d + j] = inv / dn * (dn * gd - sum_gd - xhat * sum_gdx);
                        }
                    }
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.nodes[a.0].needs_grad {
                    let shape = &self.nodes[a.0].shape;
                    let lane = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let mut da = vec![0.0; self.nodes[a.0].values.len()];
                    let inv = 1.0 / lane as f64;
                    for o in 0..outer {
                        for l in 0..lane {
                            for i in 0..inner {
                                da[(o * lane + l) * inner + i] = dc[o * inner + i] * inv;
                            }
                        }
                    }
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::SumAll { a } => {
                if self.nodes[a.0].needs_grad {
                    let da = vec![dc[0]; self.nodes[a.0].values.len()];
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[a.0].needs_grad {
                    let n = self.nodes[a.0].values.len();
                    let da = vec![dc[0] / n as f64; n];
                    self.accumulate_full(local, a, &da, 1.0);
                }
            }
            Op::MseLoss { pred, target } => {
                let n = self.nodes[pred.0].values.len() as f64;
                let scale = 2.0 * dc[0] / n;
                if self.nodes[pred.0].needs_grad || self.nodes[target.0].needs_grad {
                    let diffs: Vec<f64> = self.nodes[pred.0]
                        .values
                        .iter()
                        .zip(&self.nodes[target.0].values)
                        .map(|(p, t)| (p - t) * scale)
                        .collect();
                    self.accumulate_full(local, pred, &diffs, 1.0);
                    self.accumulate_full(local, target, &diffs, -1.0);
                }
            }
        }
        // Put the (consumed) output gradient back for the final write-out.
        local[id] = Some(dc);
    }

    /// local[a] += scale * dc, same length.
    fn accumulate_full(&self, local: &mut [Option<Vec<f64>>], a: NodeId, dc: &[f64], scale: f64) {
        let n = &self.nodes[a.0];
        if !n.needs_grad {
            return;
        }
        let g = local[a.0].get_or_insert_with(|| vec![0.0; n.values.len()]);
        debug_assert_eq!(g.len(), dc.len());
        for (gi, di) in g.iter_mut().zip(dc) {
            *gi += scale * di;
        }
    }

    /// local[b] += scale * sum over leading axes of dc (b was broadcast).
    fn accumulate_suffix(&self, local: &mut [Option<Vec<f64>>], b: NodeId, dc: &[f64], scale: f64) {
        let n = &self.nodes[b.0];
        if !n.needs_grad {
            return;
        }
        let blen = n.values.len();
        let g = local[b.0].get_or_insert_with(|| vec![0.0; blen]);
        for (i, di) in dc.iter().enumerate() {
            g[i % blen] += scale * di;
        }
    }

    fn back_matmul(
        &self,
        local: &mut [Option<Vec<f64>>],
        a: NodeId,
        b: NodeId,
        dims: MmDims,
        dc: &[f64],
    ) {
        let MmDims {
            batch,
            m,
            k,
            n,
            b_batched,
            transpose_b,
        } = dims;
        if self.nodes[a.0].needs_grad {
            let bv = &self.nodes[b.0].values;
            let mut da = vec![0.0; self.nodes[a.0].values.len()];
            for bi in 0..batch {
                let bo = if b_batched { bi * k * n } else { 0 };
                let dco = bi * m * n;
                if transpose_b {
                    // c = a b^T, b stored [n,k]: da += dc * b
                    gemm(m, n, k, &dc[dco..], n as isize, 1, &bv[bo..], k as isize, 1, 1.0, &mut da[bi * m * k..]);
                } else {
                    // da += dc * b^T, b stored [k,n]
                    gemm(m, n, k, &dc[dco..], n as isize, 1, &bv[bo..], 1, n as isize, 1.0, &mut da[bi * m * k..]);
                }
            }
            self.accumulate_full(local, a, &da, 1.0);
        }
        if self.nodes[b.0].needs_grad {
            let av = &self.nodes[a.0].values;
            let mut db = vec![0.0; self.nodes[b.0].values.len()];
            for bi in 0..batch {
                let ao = bi * m * k;
                let dco = bi * m * n;
                let out = if b_batched {
                    &mut db[bi * k * n..]
                } else {
                    &mut db[..]
                };
                if transpose_b {
                    // db += dc^T * a, db is [n,k]
                    gemm(n, m, k, &dc[dco..], 1, n as isize, &av[ao..], k as isize, 1, 1.0, out);
                } else {
                    // db += a^T * dc, db is [k,n]
                    gemm(k, m, n, &av[ao..], 1, k as isize, &dc[dco..], n as isize, 1, 1.0, out);
                }
            }
            self.accumulate_full(local, b, &db, 1.0);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// tanh approximation of GELU; exact erf is not worth the dependency.
const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3, 3], &[2.0, -1.0, 0.5, 0.0, 3.0, 1.0, -2.0, 0.25, 4.0]));
        let eye = tape.leaf(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.values(c), tape.values(a));
    }

    #[test]
    fn matmul_row_times_column() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.values(c), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_slice_product() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::randn(&[4, 3, 5], &mut rng);
        let b = Tensor::randn(&[4, 5, 2], &mut rng);
        let w = Tensor::randn(&[5, 2], &mut rng);

        let mut tape = Tape::new();
        let (ai, bi, wi) = (tape.leaf(&a), tape.leaf(&b), tape.leaf(&w));
        let ab = tape.matmul(ai, bi).unwrap();
        let aw = tape.matmul(ai, wi).unwrap();

        // Oracle: plain triple loop per batch slice.
        for bidx in 0..4 {
            for i in 0..3 {
                for j in 0..2 {
                    let mut s_b = 0.0;
                    let mut s_w = 0.0;
                    for l in 0..5 {
                        let av = a.values[(bidx * 3 + i) * 5 + l];
                        s_b += av * b.values[(bidx * 5 + l) * 2 + j];
                        s_w += av * w.values[l * 2 + j];
                    }
                    let at = (bidx * 3 + i) * 2 + j;
                    assert!((tape.values(ab)[at] - s_b).abs() < 1e-12);
                    assert!((tape.values(aw)[at] - s_w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_transpose_b_matches_explicit_transpose() {
        let mut rng = SeededRng::new(4);
        let a = Tensor::randn(&[2, 6, 3], &mut rng);
        let b = Tensor::randn(&[2, 4, 3], &mut rng); // used as [2,3,4] transposed
        let mut tape = Tape::new();
        let (ai, bi) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul_t(ai, bi, true).unwrap();
        assert_eq!(tape.shape(c), &[2, 6, 4]);
        for bidx in 0..2 {
            for i in 0..6 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for l in 0..3 {
                        s += a.values[(bidx * 6 + i) * 3 + l] * b.values[(bidx * 4 + j) * 3 + l];
                    }
                    assert!((tape.values(c)[(bidx * 6 + i) * 4 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_and_large_logits() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        for v in tape.values(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // No overflow on huge logits; result saturates to [1, 0, 0].
        let b = tape.leaf(&t(&[3], &[1000.0, 0.0, 0.0]));
        let s2 = tape.softmax(b, 0).unwrap();
        let v = tape.values(s2);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12 && v[2] < 1e-12);
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let mut rng = SeededRng::new(11);
        let x = Tensor::randn(&[5, 7, 4], &mut rng);
        for axis in 0..3 {
            let mut tape = Tape::new();
            let a = tape.leaf(&x);
            let s = tape.softmax(a, axis).unwrap();
            let shape = [5usize, 7, 4];
            let lane = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..lane).map(|l| tape.values(s)[(o * lane + l) * inner + i]).sum();
                    assert!((sum - 1.0).abs() < 1e-12, "axis {axis} lane sum {sum}");
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 3], &[5.0, 5.0, 5.0]));
        let g = tape.leaf(&Tensor::full(&[3], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.layer_norm(a, g, b, 1e-5).unwrap();
        for v in tape.values(y) {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let g = tape.leaf(&Tensor::full(&[3], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.layer_norm(a, g, b, 1e-9).unwrap();
        let v = tape.values(y);
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-7, "var {var}");
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1], &[0.0]));
        let s = tape.sigmoid(a);
        assert_eq!(tape.values(s), &[0.5]);
        // Stable at extremes.
        let b = tape.leaf(&t(&[2], &[-800.0, 800.0]));
        let sb = tape.sigmoid(b);
        assert!(tape.values(sb)[0] >= 0.0 && (tape.values(sb)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_along_last_axis_preserves_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(&[2, 5], &[10.0, 11.0, 12.0, 13.0, 14.0, 20.0, 21.0, 22.0, 23.0, 24.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        assert_eq!(
            tape.values(c),
            &[1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0, 4.0, 5.0, 6.0, 20.0, 21.0, 22.0, 23.0, 24.0]
        );
    }

    #[test]
    fn concat_rejects_mismatched_off_axis_extent() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn add_broadcasts_vector_over_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.values(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // Non-suffix shape is rejected.
        let bad = tape.leaf(&Tensor::zeros(&[2]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn mse_loss_matches_hand_value() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let q = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let l = tape.mse_loss(p, q).unwrap();
        assert_eq!(tape.values(l), &[1.0]);
        let same = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.values(same), &[0.0]);
        let bad = tape.leaf(&Tensor::zeros(&[3]));
        assert!(tape.mse_loss(p, bad).is_err());
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, -2.0, 3.0, 0.5]).with_grad());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.mul_scalar(x, 2.0);
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3.0, 4.0]).with_grad());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_all_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn mse_of_linear_map_matches_analytic_gradient() {
        // loss = mse(W x, y); dL/dW = 2 (Wx - y) x^T / N, N = rows of Wx.
        let w_vals = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let x_vals = [1.0, -2.0];
        let y_vals = [0.3, 0.1, -0.4];
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3, 2], &w_vals).with_grad());
        let x = tape.leaf(&t(&[2, 1], &x_vals));
        let y = tape.leaf(&t(&[3, 1], &y_vals));
        let wx = tape.matmul(w, x).unwrap();
        let loss = tape.mse_loss(wx, y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for i in 0..3 {
            let ri = w_vals[2 * i] * x_vals[0] + w_vals[2 * i + 1] * x_vals[1] - y_vals[i];
            for j in 0..2 {
                let expect = 2.0 * ri * x_vals[j] / 3.0;
                assert!((g[2 * i + j] - expect).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn lookup_gathers_rows_and_scatters_gradients() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let out = tape.lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.values(out), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum_all(out);
        tape.backward(s).unwrap();
        // Row 2 hit twice, row 0 once, row 1 never.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.lookup(table, &[3]).is_err());
    }

    #[test]
    fn repeat_positions_spreads_rows_and_sums_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let r = tape.repeat_positions(a, 3).unwrap();
        assert_eq!(tape.shape(r), &[2, 3, 2]);
        assert_eq!(
            tape.values(r),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
        let s = tape.sum_all(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn mean_axis_reduces_middle_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2, 3], &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]).with_grad());
        let m = tape.mean_axis(a, 1).unwrap();
        assert_eq!(tape.shape(m), &[1, 3]);
        assert_eq!(tape.values(m), &[2.0, 3.0, 4.0]);
        let s = tape.sum_all(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.5; 6]);
    }
}
