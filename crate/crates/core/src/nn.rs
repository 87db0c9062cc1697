//! Network building blocks shared by both generators: scaled dot-product
//! attention, post-norm transformer blocks, condition-induced linear layers
//! and the sinusoidal / category-table encodings.
//!
//! Parameter structs own their tensors; `insert` copies them onto a [`Tape`]
//! and returns a mirror struct of node ids that the forward functions
//! consume. `collect` / `collect_mut` enumerate parameters in the identical
//! order, which is what ties checkpoint names, optimizer slots and tape
//! gradients together. Keep the three in sync when touching any of them.
//!
//! The attention and transformer blocks carry no positional signal of their
//! own: permuting input rows permutes outputs identically. Models inject
//! sequence-position information upstream of the block stack.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, SeededRng, Tape, Tensor};

/// Layer-norm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;

/// Number of condition categories (direction x class x aggressiveness).
pub const NUM_CATEGORIES: usize = 12;

/// Row of the category table reserved for the unconditional token.
pub const NULL_CATEGORY_ROW: usize = NUM_CATEGORIES;

// ---- initialization ---------------------------------------------------------

/// Uniform Xavier/Glorot: U[-a, a] with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
    Tensor::new(vec![fan_in, fan_out], values)
        .expect("consistent by construction")
        .with_grad()
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

// ---- checkpoint restore -----------------------------------------------------

/// One named parameter as carried by a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Copy checkpoint entries into parameters, matching names and shapes
/// against the model's canonical order. Duplicate, unknown, missing or
/// misshapen entries are format errors and leave no partial writes behind.
pub fn restore_named(
    names: &[String],
    targets: &mut [&mut Tensor],
    entries: &[ParamEntry],
) -> Result<()> {
    if names.len() != targets.len() {
        return Err(Error::usage(
            "restore_named",
            format!("{} names for {} parameters", names.len(), targets.len()),
        ));
    }
    let mut by_name = std::collections::HashMap::with_capacity(entries.len());
    for e in entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Format(format!("duplicate parameter {:?}", e.name)));
        }
    }
    for e in entries {
        if !names.iter().any(|n| n == &e.name) {
            return Err(Error::Format(format!("unknown parameter {:?}", e.name)));
        }
    }
    // Validate everything before touching any tensor.
    for (name, target) in names.iter().zip(targets.iter()) {
        let entry = *by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))?;
        if entry.shape != target.shape || entry.values.len() != target.values.len() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                entry.shape, target.shape
            )));
        }
    }
    for (name, target) in names.iter().zip(targets.iter_mut()) {
        target.values.copy_from_slice(&by_name[name.as_str()].values);
    }
    Ok(())
}

// ---- affine -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy)]
pub struct AffineRefs {
    pub w: NodeId,
    pub b: NodeId,
}

impl Affine {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Affine {
            w: xavier(fan_in, fan_out, rng),
            b: zeros_param(&[fan_out]),
        }
    }

    /// All-zero weights; used where the initial output must be exactly zero.
    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            w: zeros_param(&[fan_in, fan_out]),
            b: zeros_param(&[fan_out]),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> AffineRefs {
        AffineRefs {
            w: tape.leaf(&self.w),
            b: tape.leaf(&self.b),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

impl AffineRefs {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.affine(x, self.w, self.b)
    }

    pub fn ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.w);
        out.push(self.b);
    }

    pub fn from_ids(it: &mut impl Iterator<Item = NodeId>) -> Self {
        AffineRefs { w: take(it), b: take(it) }
    }
}

/// Next id from a flat stream laid out in canonical parameter order (the
/// order `insert`, `collect` and `ids` all share). The `from_ids`
/// constructors let callers that leaf parameters themselves (the gradient
/// checker, the checkpoint loader) rebuild the ref structure.
fn take(it: &mut impl Iterator<Item = NodeId>) -> NodeId {
    it.next().expect("parameter id stream exhausted")
}

// ---- layer norm parameters ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy)]
pub struct LayerNormRefs {
    pub gain: NodeId,
    pub bias: NodeId,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(&[dim], 1.0).with_grad(),
            bias: zeros_param(&[dim]),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> LayerNormRefs {
        LayerNormRefs {
            gain: tape.leaf(&self.gain),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl LayerNormRefs {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.layer_norm(x, self.gain, self.bias, LN_EPS)
    }

    pub fn ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.gain);
        out.push(self.bias);
    }

    pub fn from_ids(it: &mut impl Iterator<Item = NodeId>) -> Self {
        LayerNormRefs { gain: take(it), bias: take(it) }
    }
}

// ---- attention -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Clone, Copy)]
pub struct AttentionHeadRefs {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: Vec<AttentionHead>,
    pub w_out: Tensor,
    pub d_k: usize,
    pub d_v: usize,
}

#[derive(Clone)]
pub struct AttentionRefs {
    pub heads: Vec<AttentionHeadRefs>,
    pub w_out: NodeId,
    pub d_k: usize,
}

impl Attention {
    /// `h` heads with separate projection matrices; output projection maps
    /// the concatenated heads (h * d_v) back to `d_model`.
    pub fn new(d_model: usize, h: usize, d_k: usize, d_v: usize, rng: &mut SeededRng) -> Result<Self> {
        if h == 0 || d_k == 0 || d_v == 0 || d_model == 0 {
            return Err(Error::Config(format!(
                "attention dimensions must be positive, got d_model {d_model}, h {h}, d_k {d_k}, d_v {d_v}"
            )));
        }
        let heads = (0..h)
            .map(|_| AttentionHead {
                wq: xavier(d_model, d_k, rng),
                wk: xavier(d_model, d_k, rng),
                wv: xavier(d_model, d_v, rng),
            })
            .collect();
        Ok(Attention {
            heads,
            w_out: xavier(h * d_v, d_model, rng),
            d_k,
            d_v,
        })
    }

    pub fn insert(&self, tape: &mut Tape) -> AttentionRefs {
        AttentionRefs {
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHeadRefs {
                    wq: tape.leaf(&h.wq),
                    wk: tape.leaf(&h.wk),
                    wv: tape.leaf(&h.wv),
                })
                .collect(),
            w_out: tape.leaf(&self.w_out),
            d_k: self.d_k,
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.wq"), &h.wq));
            out.push((format!("{prefix}.head{i}.wk"), &h.wk));
            out.push((format!("{prefix}.head{i}.wv"), &h.wv));
        }
        out.push((format!("{prefix}.w_out"), &self.w_out));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for h in &mut self.heads {
            out.push(&mut h.wq);
            out.push(&mut h.wk);
            out.push(&mut h.wv);
        }
        out.push(&mut self.w_out);
    }
}

impl AttentionRefs {
    pub fn ids(&self, out: &mut Vec<NodeId>) {
        for h in &self.heads {
            out.push(h.wq);
            out.push(h.wk);
            out.push(h.wv);
        }
        out.push(self.w_out);
    }

    pub fn from_ids(h: usize, d_k: usize, it: &mut impl Iterator<Item = NodeId>) -> Self {
        AttentionRefs {
            heads: (0..h)
                .map(|_| AttentionHeadRefs { wq: take(it), wk: take(it), wv: take(it) })
                .collect(),
            w_out: take(it),
            d_k,
        }
    }
}

/// Scaled dot-product attention over already-projected q, k, v, each
/// [B, s, d]: softmax(q k^T / sqrt(d_k)) v.
pub fn scaled_attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId, d_k: usize) -> Result<NodeId> {
    let scores = tape.matmul_t(q, k, true)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (d_k as f64).sqrt());
    let axis = tape.shape(scaled).len() - 1;
    let a = tape.softmax(scaled, axis)?;
    tape.matmul(a, v)
}

/// Multi-head self-attention over x: [B, s, d_model] (or [s, d_model]).
pub fn multi_head_attention(tape: &mut Tape, x: NodeId, attn: &AttentionRefs) -> Result<NodeId> {
    let (x, batched) = ensure_batched(tape, x)?;
    let mut heads = Vec::with_capacity(attn.heads.len());
    for h in &attn.heads {
        let q = tape.matmul(x, h.wq)?;
        let k = tape.matmul(x, h.wk)?;
        let v = tape.matmul(x, h.wv)?;
        heads.push(scaled_attention(tape, q, k, v, attn.d_k)?);
    }
    let cat = tape.concat(&heads, 2)?;
    let out = tape.matmul(cat, attn.w_out)?;
    debatch(tape, out, batched)
}

// ---- transformer block -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: Attention,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub ff1: Affine,
    pub ff2: Affine,
}

#[derive(Clone)]
pub struct TransformerBlockRefs {
    pub attn: AttentionRefs,
    pub norm1: LayerNormRefs,
    pub norm2: LayerNormRefs,
    pub ff1: AffineRefs,
    pub ff2: AffineRefs,
}

impl TransformerBlock {
    /// `residual_scale` shrinks the two projections that feed the residual
    /// sums (the attention output and the second feed-forward layer) at
    /// init. Post-norm re-normalizes x + branch, so branches initialized at
    /// full Xavier scale drown the skip path and the stack starts out unable
    /// to pass its input through; 1 / sqrt(2 * depth) keeps the combined
    /// branch contribution of the whole stack at unit order.
    pub fn new(
        d_model: usize,
        h: usize,
        d_k: usize,
        d_v: usize,
        ff_dim: usize,
        residual_scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if ff_dim == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        if !(residual_scale > 0.0 && residual_scale.is_finite()) {
            return Err(Error::Config(format!(
                "residual scale {residual_scale} must be positive"
            )));
        }
        let mut attn = Attention::new(d_model, h, d_k, d_v, rng)?;
        let ff1 = Affine::new(d_model, ff_dim, rng);
        let mut ff2 = Affine::new(ff_dim, d_model, rng);
        for v in attn.w_out.values.iter_mut().chain(ff2.w.values.iter_mut()) {
            *v *= residual_scale;
        }
        Ok(TransformerBlock {
            attn,
            norm1: LayerNormParams::new(d_model),
            norm2: LayerNormParams::new(d_model),
            ff1,
            ff2,
        })
    }

    pub fn insert(&self, tape: &mut Tape) -> TransformerBlockRefs {
        TransformerBlockRefs {
            attn: self.attn.insert(tape),
            norm1: self.norm1.insert(tape),
            norm2: self.norm2.insert(tape),
            ff1: self.ff1.insert(tape),
            ff2: self.ff2.insert(tape),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
        self.ff1.collect(&format!("{prefix}.ff1"), out);
        self.ff2.collect(&format!("{prefix}.ff2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.attn.collect_mut(out);
        self.norm1.collect_mut(out);
        self.norm2.collect_mut(out);
        self.ff1.collect_mut(out);
        self.ff2.collect_mut(out);
    }
}

impl TransformerBlockRefs {
    pub fn ids(&self, out: &mut Vec<NodeId>) {
        self.attn.ids(out);
        self.norm1.ids(out);
        self.norm2.ids(out);
        self.ff1.ids(out);
        self.ff2.ids(out);
    }

    pub fn from_ids(h: usize, d_k: usize, it: &mut impl Iterator<Item = NodeId>) -> Self {
        TransformerBlockRefs {
            attn: AttentionRefs::from_ids(h, d_k, it),
            norm1: LayerNormRefs::from_ids(it),
            norm2: LayerNormRefs::from_ids(it),
            ff1: AffineRefs::from_ids(it),
            ff2: AffineRefs::from_ids(it),
        }
    }
}

/// Post-norm transformer block:
/// x' = LayerNorm(x + MSA(x)); y = LayerNorm(x' + FF(x'))
/// with FF = linear -> GELU -> linear.
pub fn transformer_block(tape: &mut Tape, x: NodeId, block: &TransformerBlockRefs) -> Result<NodeId> {
    let (x, batched) = ensure_batched(tape, x)?;
    let msa = multi_head_attention(tape, x, &block.attn)?;
    let r1 = tape.add(x, msa)?;
    let x1 = block.norm1.apply(tape, r1)?;
    let f1 = block.ff1.apply(tape, x1)?;
    let g = tape.gelu(f1);
    let f2 = block.ff2.apply(tape, g)?;
    let r2 = tape.add(x1, f2)?;
    let y = block.norm2.apply(tape, r2)?;
    debatch(tape, y, batched)
}

// ---- condition-induced linear -----------------------------------------------------

/// f(x, c) = (W1^T x + b1) .* sigmoid(W2^T x + b2) + (W3^T c + b3),
/// applied per sequence position with c shared across positions. The output
/// is exactly linear in c when x is held fixed.
#[derive(Clone, Debug)]
pub struct ConditionLinear {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Clone, Copy)]
pub struct ConditionLinearRefs {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl ConditionLinear {
    pub fn new(x_dim: usize, c_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        ConditionLinear {
            w1: xavier(x_dim, out_dim, rng),
            b1: zeros_param(&[out_dim]),
            w2: xavier(x_dim, out_dim, rng),
            b2: zeros_param(&[out_dim]),
            w3: xavier(c_dim, out_dim, rng),
            b3: zeros_param(&[out_dim]),
        }
    }

    /// Value path and condition path zeroed (gate path keeps Xavier): the
    /// layer outputs exactly zero until training moves w1/w3. Used as the
    /// final layer of the noise predictor and decoder so that untrained
    /// models predict zero.
    pub fn zeroed_output(x_dim: usize, c_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        ConditionLinear {
            w1: zeros_param(&[x_dim, out_dim]),
            b1: zeros_param(&[out_dim]),
            w2: xavier(x_dim, out_dim, rng),
            b2: zeros_param(&[out_dim]),
            w3: zeros_param(&[c_dim, out_dim]),
            b3: zeros_param(&[out_dim]),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> ConditionLinearRefs {
        ConditionLinearRefs {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
            w3: tape.leaf(&self.w3),
            b3: tape.leaf(&self.b3),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
        out.push((format!("{prefix}.w3"), &self.w3));
        out.push((format!("{prefix}.b3"), &self.b3));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w1);
        out.push(&mut self.b1);
        out.push(&mut self.w2);
        out.push(&mut self.b2);
        out.push(&mut self.w3);
        out.push(&mut self.b3);
    }
}

impl ConditionLinearRefs {
    pub fn ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.w1);
        out.push(self.b1);
        out.push(self.w2);
        out.push(self.b2);
        out.push(self.w3);
        out.push(self.b3);
    }

    pub fn from_ids(it: &mut impl Iterator<Item = NodeId>) -> Self {
        ConditionLinearRefs {
            w1: take(it),
            b1: take(it),
            w2: take(it),
            b2: take(it),
            w3: take(it),
            b3: take(it),
        }
    }
}

/// Apply the condition-induced linear layer. x: [B, s, x_dim] (or
/// [s, x_dim]), c: [B, c_dim] (or [c_dim]); the c term is broadcast over
/// sequence positions.
pub fn condition_linear(tape: &mut Tape, x: NodeId, c: NodeId, refs: &ConditionLinearRefs) -> Result<NodeId> {
    let (x, batched) = ensure_batched(tape, x)?;
    let c = if tape.shape(c).len() == 1 {
        let d = tape.shape(c)[0];
        tape.reshape(c, &[1, d])?
    } else {
        c
    };
    if tape.shape(c).len() != 2 || tape.shape(c)[0] != tape.shape(x)[0] {
        return Err(Error::ShapeMismatch {
            op: "condition_linear",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(c).to_vec(),
        });
    }
    let positions = tape.shape(x)[1];
    let value = tape.affine(x, refs.w1, refs.b1)?;
    let gate_pre = tape.affine(x, refs.w2, refs.b2)?;
    let gate = tape.sigmoid(gate_pre);
    let gated = tape.mul(value, gate)?;
    let cond = tape.affine(c, refs.w3, refs.b3)?;
    let cond_rows = tape.repeat_positions(cond, positions)?;
    let y = tape.add(gated, cond_rows)?;
    debatch(tape, y, batched)
}

// ---- encodings ------------------------------------------------------------------

/// Sinusoidal encoding of a non-negative index: entry 2i holds
/// sin(k / 10000^(2i/dim)), entry 2i+1 the matching cosine. `dim` must be
/// even.
pub fn sinusoidal_encode(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding width must be positive and even, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10_000f64.powf(-(2.0 * i as f64) / dim as f64);
        let angle = k as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Rows 0..s of the sinusoidal encoding, as an [s, dim] tensor. Added to
/// per-position features ahead of the transformer stack; the blocks
/// themselves are order-blind.
pub fn positional_encoding(s: usize, dim: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(s * dim);
    for pos in 0..s {
        values.extend(sinusoidal_encode(pos, dim)?);
    }
    Tensor::new(vec![s, dim], values)
}

// ---- category table ----------------------------------------------------------------

/// Learnable embedding per condition category plus one null row used for
/// classifier-free training and unconditional sampling.
#[derive(Clone, Debug)]
pub struct CategoryTable {
    pub table: Tensor,
}

#[derive(Clone, Copy)]
pub struct CategoryTableRefs {
    pub table: NodeId,
}

impl CategoryTable {
    pub fn new(dim: usize, rng: &mut SeededRng) -> Self {
        let rows = NUM_CATEGORIES + 1;
        let values = (0..rows * dim).map(|_| 0.02 * rng.normal()).collect();
        CategoryTable {
            table: Tensor::new(vec![rows, dim], values).expect("consistent").with_grad(),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape[1]
    }

    pub fn insert(&self, tape: &mut Tape) -> CategoryTableRefs {
        CategoryTableRefs {
            table: tape.leaf(&self.table),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.table"), &self.table));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.table);
    }
}

impl CategoryTableRefs {
    pub fn ids(&self, out: &mut Vec<NodeId>) {
        out.push(self.table);
    }

    pub fn from_ids(it: &mut impl Iterator<Item = NodeId>) -> Self {
        CategoryTableRefs { table: take(it) }
    }
}

/// Per-sample condition embedding: learnable category row (null row where
/// `categories[i]` is None) concatenated with the sinusoidal encoding of the
/// per-sample diffusion step. Output [B, table_dim + time_dim].
pub fn build_condition_embedding(
    tape: &mut Tape,
    table: &CategoryTableRefs,
    categories: &[Option<usize>],
    steps: &[usize],
    time_dim: usize,
) -> Result<NodeId> {
    if categories.len() != steps.len() || categories.is_empty() {
        return Err(Error::usage(
            "build_condition_embedding",
            format!("{} categories vs {} steps", categories.len(), steps.len()),
        ));
    }
    let rows: Vec<usize> = categories
        .iter()
        .map(|c| match c {
            Some(i) if *i < NUM_CATEGORIES => Ok(*i),
            Some(i) => Err(Error::usage(
                "build_condition_embedding",
                format!("category index {i} out of range 0..{NUM_CATEGORIES}"),
            )),
            None => Ok(NULL_CATEGORY_ROW),
        })
        .collect::<Result<_>>()?;
    let cat = tape.lookup(table.table, &rows)?;
    let mut time_values = Vec::with_capacity(steps.len() * time_dim);
    for &k in steps {
        time_values.extend(sinusoidal_encode(k, time_dim)?);
    }
    let time = tape.constant_from(&[steps.len(), time_dim], time_values)?;
    tape.concat(&[cat, time], 1)
}

// ---- shape helpers -----------------------------------------------------------------

/// Promote [s, d] to [1, s, d]; rank-3 passes through.
fn ensure_batched(tape: &mut Tape, x: NodeId) -> Result<(NodeId, bool)> {
    match tape.shape(x).len() {
        3 => Ok((x, true)),
        2 => {
            let s = tape.shape(x).to_vec();
            Ok((tape.reshape(x, &[1, s[0], s[1]])?, false))
        }
        _ => Err(Error::usage(
            "ensure_batched",
            format!("expected rank 2 or 3, got shape {:?}", tape.shape(x)),
        )),
    }
}

/// Undo `ensure_batched` when the input was rank 2.
fn debatch(tape: &mut Tape, y: NodeId, was_batched: bool) -> Result<NodeId> {
    if was_batched {
        Ok(y)
    } else {
        let s = tape.shape(y).to_vec();
        tape.reshape(y, &[s[1], s[2]])
    }
}
