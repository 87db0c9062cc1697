//! Denoising diffusion over trajectory increments: a linear beta schedule,
//! closed-form forward corruption, a conditional transformer that predicts
//! the injected noise, and the ancestral reverse sampler with optional
//! classifier-free guidance.
//!
//! Everything operates on normalized increment vectors laid out [s, 2]
//! row-major; batches stack them as [B, s, 2]. Diffusion steps k are
//! 1-based: k = 0 is clean data, k = K is (nearly) pure noise.

use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::nn::{
    self,
    build_condition_embedding, condition_linear, positional_encoding, transformer_block, Affine,
    AffineRefs, CategoryTable, CategoryTableRefs, ConditionLinear, ConditionLinearRefs,
    TransformerBlock, TransformerBlockRefs, NUM_CATEGORIES,
};
use crate::tensor::{AdamState, NodeId, SeededRng, Tape, Tensor};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

/// Terminal signal cap: the reverse sampler starts from N(0, I), which is
/// only the true marginal when almost no signal survives at step K.
pub const TERMINAL_SIGNAL_CAP: f64 = 0.01;

// ---- noise schedule ---------------------------------------------------------

/// Per-step noise levels. Index i holds step k = i + 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` (k = 1) to `beta_end`
    /// (k = K).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if beta_start > beta_end {
            return Err(Error::Config(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            betas.push(beta_start + (beta_end - beta_start) * t);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let schedule = NoiseSchedule { betas, alphas, alpha_bars };
        schedule.validate()?;
        Ok(schedule)
    }

    /// The schedule used when nothing else is configured: K = 100 with betas
    /// from 1e-3 to 0.2, leaving terminal signal around 2e-5.
    pub fn standard() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("standard schedule is valid")
    }

    pub fn k_max(&self) -> usize {
        self.betas.len()
    }

    fn check_k(&self, op: &'static str, k: usize) -> Result<()> {
        if k == 0 || k > self.k_max() {
            return Err(Error::usage(
                op,
                format!("step {k} outside 1..={}", self.k_max()),
            ));
        }
        Ok(())
    }

    /// Invariants every usable schedule satisfies: betas strictly inside
    /// (0, 1), alpha_bars consistent with the betas and strictly decreasing,
    /// and terminal signal below `TERMINAL_SIGNAL_CAP`.
    pub fn validate(&self) -> Result<()> {
        let k_max = self.betas.len();
        if k_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if self.alphas.len() != k_max || self.alpha_bars.len() != k_max {
            return Err(Error::Config(format!(
                "schedule arrays disagree: {} betas, {} alphas, {} alpha_bars",
                k_max,
                self.alphas.len(),
                self.alpha_bars.len()
            )));
        }
        let mut prod = 1.0;
        for i in 0..k_max {
            let k = i + 1;
            let beta = self.betas[i];
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::Config(format!("beta_{k} = {beta} outside (0, 1)")));
            }
            if (self.alphas[i] - (1.0 - beta)).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "alpha_{k} = {} does not match 1 - beta_{k}",
                    self.alphas[i]
                )));
            }
            prod *= self.alphas[i];
            if (self.alpha_bars[i] - prod).abs() > 1e-12 * prod.max(1e-300) {
                return Err(Error::Config(format!(
                    "alpha_bar_{k} = {} does not match the alpha product {prod}",
                    self.alpha_bars[i]
                )));
            }
            if i > 0 && self.alpha_bars[i] >= self.alpha_bars[i - 1] {
                return Err(Error::Config(format!(
                    "alpha_bar must decrease strictly, violated at step {k}"
                )));
            }
        }
        let terminal = self.alpha_bars[k_max - 1];
        if terminal >= TERMINAL_SIGNAL_CAP {
            return Err(Error::Config(format!(
                "terminal alpha_bar {terminal} is not below {TERMINAL_SIGNAL_CAP}; \
                 sampling starts from pure noise, so almost no signal may survive \
                 step K (raise beta_end or the step count)"
            )));
        }
        Ok(())
    }
}

// ---- forward process --------------------------------------------------------

/// Closed-form corruption: x_k = sqrt(alpha_bar_k) x_0 + sqrt(1 - alpha_bar_k) eps.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_k("forward_sample", k)?;
    if x0.len() != eps.len() {
        return Err(Error::usage(
            "forward_sample",
            format!("x0 has {} values, eps {}", x0.len(), eps.len()),
        ));
    }
    let ab = schedule.alpha_bars[k - 1];
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect())
}

/// Single corruption step: x_k = sqrt(1 - beta_k) x_{k-1} + sqrt(beta_k) eps.
pub fn forward_step(schedule: &NoiseSchedule, x_prev: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_k("forward_step", k)?;
    if x_prev.len() != eps.len() {
        return Err(Error::usage(
            "forward_step",
            format!("x has {} values, eps {}", x_prev.len(), eps.len()),
        ));
    }
    let beta = schedule.betas[k - 1];
    let (signal, noise) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(x_prev.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect())
}

/// One ancestral denoising step from x_k to x_{k-1}:
/// mu = (x_k - beta_k / sqrt(1 - alpha_bar_k) * eps_hat) / sqrt(alpha_k),
/// then mu + sqrt(beta_k) z with fresh z for k > 1 and z forced to zero at
/// the last step (`z` is ignored there and may be empty).
pub fn reverse_step(
    schedule: &NoiseSchedule,
    k: usize,
    x_k: &[f64],
    eps_hat: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_k("reverse_step", k)?;
    if x_k.len() != eps_hat.len() {
        return Err(Error::usage(
            "reverse_step",
            format!("x has {} values, eps_hat {}", x_k.len(), eps_hat.len()),
        ));
    }
    if k > 1 && z.len() != x_k.len() {
        return Err(Error::usage(
            "reverse_step",
            format!("x has {} values, z {}", x_k.len(), z.len()),
        ));
    }
    let beta = schedule.betas[k - 1];
    let coef = beta / (1.0 - schedule.alpha_bars[k - 1]).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alphas[k - 1].sqrt();
    let sigma = beta.sqrt();
    Ok(x_k
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let mu = inv_sqrt_alpha * (x - coef * e);
            if k > 1 {
                mu + sigma * z[i]
            } else {
                mu
            }
        })
        .collect())
}

/// Classifier-free guidance blend: (1 + w) eps_cond - w eps_uncond. At
/// w = 0 this is exactly the conditional prediction.
pub fn guided_noise(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::usage(
            "guided_noise",
            format!("{} conditional vs {} unconditional values", eps_cond.len(), eps_uncond.len()),
        ));
    }
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect())
}

// ---- noise predictor --------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub ff: usize,
    pub category_dim: usize,
    pub time_dim: usize,
    pub bottleneck: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            heads: 4,
            head_dim: 32,
            blocks: 4,
            ff: 256,
            category_dim: 64,
            time_dim: 64,
            bottleneck: 32,
            seq_len: 14,
        }
    }
}

impl ModelConfig {
    pub fn condition_dim(&self) -> usize {
        self.category_dim + self.time_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("blocks", self.blocks),
            ("ff", self.ff),
            ("category_dim", self.category_dim),
            ("time_dim", self.time_dim),
            ("bottleneck", self.bottleneck),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model dimension {name} must be positive")));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time encoding width must be even, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// The conditional noise predictor: per-point embedding, condition fusion,
/// fixed positional encoding, a transformer stack, and a two-stage
/// condition-linear head whose final layer starts at exactly zero.
#[derive(Clone, Debug)]
pub struct Transfusor {
    pub config: ModelConfig,
    pub embed: Affine,
    pub table: CategoryTable,
    pub fuse: ConditionLinear,
    pub blocks: Vec<TransformerBlock>,
    pub head_mid: ConditionLinear,
    pub head_out: ConditionLinear,
}

#[derive(Clone)]
pub struct TransfusorRefs {
    pub embed: AffineRefs,
    pub table: CategoryTableRefs,
    pub fuse: ConditionLinearRefs,
    pub blocks: Vec<TransformerBlockRefs>,
    pub head_mid: ConditionLinearRefs,
    pub head_out: ConditionLinearRefs,
    pub time_dim: usize,
}

impl Transfusor {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c_dim = config.condition_dim();
        let residual_scale = 1.0 / (2.0 * config.blocks as f64).sqrt();
        Ok(Transfusor {
            embed: Affine::new(2, config.hidden, rng),
            table: CategoryTable::new(config.category_dim, rng),
            fuse: ConditionLinear::new(config.hidden, c_dim, config.hidden, rng),
            blocks: (0..config.blocks)
                .map(|_| {
                    TransformerBlock::new(
                        config.hidden,
                        config.heads,
                        config.head_dim,
                        config.head_dim,
                        config.ff,
                        residual_scale,
                        rng,
                    )
                })
                .collect::<Result<_>>()?,
            head_mid: ConditionLinear::new(config.hidden, c_dim, config.bottleneck, rng),
            head_out: ConditionLinear::zeroed_output(config.bottleneck, c_dim, 2, rng),
            config,
        })
    }

    pub fn insert(&self, tape: &mut Tape) -> TransfusorRefs {
        TransfusorRefs {
            embed: self.embed.insert(tape),
            table: self.table.insert(tape),
            fuse: self.fuse.insert(tape),
            blocks: self.blocks.iter().map(|b| b.insert(tape)).collect(),
            head_mid: self.head_mid.insert(tape),
            head_out: self.head_out.insert(tape),
            time_dim: self.config.time_dim,
        }
    }

    /// Parameters with stable names, in canonical order (the order `insert`,
    /// `params_mut` and `TransfusorRefs::ids` share).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.embed.collect("embed", &mut out);
        self.table.collect("categories", &mut out);
        self.fuse.collect("fuse", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("block{i}"), &mut out);
        }
        self.head_mid.collect("head_mid", &mut out);
        self.head_out.collect("head_out", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.embed.collect_mut(&mut out);
        self.table.collect_mut(&mut out);
        self.fuse.collect_mut(&mut out);
        for b in &mut self.blocks {
            b.collect_mut(&mut out);
        }
        self.head_mid.collect_mut(&mut out);
        self.head_out.collect_mut(&mut out);
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named_params().iter().map(|(_, t)| t.numel()).collect()
    }

    /// Overwrite every parameter from named checkpoint entries.
    pub fn restore_params(&mut self, entries: &[nn::ParamEntry]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        nn::restore_named(&names, &mut self.params_mut(), entries)
    }
}

impl TransfusorRefs {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.embed.ids(&mut out);
        self.table.ids(&mut out);
        self.fuse.ids(&mut out);
        for b in &self.blocks {
            b.ids(&mut out);
        }
        self.head_mid.ids(&mut out);
        self.head_out.ids(&mut out);
        out
    }

    /// Rebuild refs from ids laid out in canonical order (gradient-check
    /// harness support).
    pub fn from_ids(config: &ModelConfig, it: &mut impl Iterator<Item = NodeId>) -> Self {
        TransfusorRefs {
            embed: AffineRefs::from_ids(it),
            table: CategoryTableRefs::from_ids(it),
            fuse: ConditionLinearRefs::from_ids(it),
            blocks: (0..config.blocks)
                .map(|_| TransformerBlockRefs::from_ids(config.heads, config.head_dim, it))
                .collect(),
            head_mid: ConditionLinearRefs::from_ids(it),
            head_out: ConditionLinearRefs::from_ids(it),
            time_dim: config.time_dim,
        }
    }
}

/// Predict the noise inside x ([B, s, 2], or [s, 2] for a single sample)
/// given each sample's diffusion step and category (None = unconditional).
pub fn predict_noise(
    tape: &mut Tape,
    refs: &TransfusorRefs,
    x: NodeId,
    steps: &[usize],
    categories: &[Option<usize>],
) -> Result<NodeId> {
    let (x, batched) = match tape.shape(x).len() {
        3 => (x, true),
        2 => {
            let s = tape.shape(x).to_vec();
            (tape.reshape(x, &[1, s[0], s[1]])?, false)
        }
        _ => {
            return Err(Error::usage(
                "predict_noise",
                format!("expected [B, s, 2] or [s, 2], got {:?}", tape.shape(x)),
            ))
        }
    };
    let (b, s, d) = (tape.shape(x)[0], tape.shape(x)[1], tape.shape(x)[2]);
    if d != 2 {
        return Err(Error::usage(
            "predict_noise",
            format!("points must have 2 coordinates, got {d}"),
        ));
    }
    if steps.len() != b || categories.len() != b {
        return Err(Error::usage(
            "predict_noise",
            format!("batch {b} with {} steps and {} categories", steps.len(), categories.len()),
        ));
    }
    let cond = build_condition_embedding(tape, &refs.table, categories, steps, refs.time_dim)?;
    let mut h = refs.embed.apply(tape, x)?;
    h = condition_linear(tape, h, cond, &refs.fuse)?;
    let hidden = tape.shape(h)[2];
    let pos = positional_encoding(s, hidden)?;
    let mut tiled = Vec::with_capacity(b * s * hidden);
    for _ in 0..b {
        tiled.extend_from_slice(&pos.values);
    }
    let pos_id = tape.constant_from(&[b, s, hidden], tiled)?;
    h = tape.add(h, pos_id)?;
    for block in &refs.blocks {
        h = transformer_block(tape, h, block)?;
    }
    let mid = condition_linear(tape, h, cond, &refs.head_mid)?;
    let out = condition_linear(tape, mid, cond, &refs.head_out)?;
    if batched {
        Ok(out)
    } else {
        let sh = tape.shape(out).to_vec();
        tape.reshape(out, &[sh[1], sh[2]])
    }
}

// ---- training ---------------------------------------------------------------

/// Frozen randomness for one training sample. The train loop draws these;
/// tests inject fixed values to pin loss numbers down.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub k: usize,
    pub eps: Vec<f64>,
    pub drop_condition: bool,
}

/// Noise-prediction loss over a batch: corrupt each example to its drawn
/// step, predict the injected noise, return MSE over every coordinate.
pub fn training_loss(
    tape: &mut Tape,
    refs: &TransfusorRefs,
    schedule: &NoiseSchedule,
    batch: &[&TrainingExample],
    draws: &[NoiseDraw],
) -> Result<NodeId> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::usage(
            "training_loss",
            format!("{} examples vs {} draws", batch.len(), draws.len()),
        ));
    }
    let dim = batch[0].deltas.len();
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::usage(
            "training_loss",
            format!("flat increment length {dim} is not a positive multiple of 2"),
        ));
    }
    let s = dim / 2;
    let b = batch.len();
    let mut corrupted = Vec::with_capacity(b * dim);
    let mut targets = Vec::with_capacity(b * dim);
    let mut ks = Vec::with_capacity(b);
    let mut cats = Vec::with_capacity(b);
    for (ex, draw) in batch.iter().zip(draws) {
        if ex.deltas.len() != dim {
            return Err(Error::usage(
                "training_loss",
                format!("example has {} values, batch uses {dim}", ex.deltas.len()),
            ));
        }
        corrupted.extend(forward_sample(schedule, &ex.deltas, draw.k, &draw.eps)?);
        targets.extend_from_slice(&draw.eps);
        ks.push(draw.k);
        cats.push(if draw.drop_condition { None } else { Some(ex.category) });
    }
    let x = tape.constant_from(&[b, s, 2], corrupted)?;
    let eps = tape.constant_from(&[b, s, 2], targets)?;
    let pred = predict_noise(tape, refs, x, &ks, &cats)?;
    tape.mse_loss(pred, eps)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a sample's category with the null row so the
    /// model also learns the unconditional distribution.
    pub p_uncond: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 80, batch_size: 32, lr: 1e-3, p_uncond: 0.1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "p_uncond {} outside [0, 1]",
                self.p_uncond
            )));
        }
        Ok(())
    }
}

/// Adam training loop. Returns per-epoch mean losses and reports each epoch
/// through `on_epoch(epoch, loss, &model)` — the model reference lets
/// callers checkpoint mid-run without restarting the optimizer. Aborts with
/// an error on non-finite loss or gradients, leaving parameters at their
/// last finite state.
pub fn train_transfusor(
    model: &mut Transfusor,
    schedule: &NoiseSchedule,
    examples: &[TrainingExample],
    tc: &TrainConfig,
    rng: &mut SeededRng,
    mut on_epoch: impl FnMut(usize, f64, &Transfusor),
) -> Result<Vec<f64>> {
    tc.validate()?;
    schedule.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let dim = model.config.seq_len * 2;
    for ex in examples {
        if ex.deltas.len() != dim {
            return Err(Error::Training(format!(
                "example has {} values, model expects {dim}",
                ex.deltas.len()
            )));
        }
        if ex.category >= NUM_CATEGORIES {
            return Err(Error::Training(format!(
                "category index {} out of range 0..{NUM_CATEGORIES}",
                ex.category
            )));
        }
    }
    let mut adam = AdamState::new(&model.param_sizes(), tc.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let draws: Vec<NoiseDraw> = batch
                .iter()
                .map(|_| NoiseDraw {
                    k: rng.index(schedule.k_max()) + 1,
                    eps: rng.normal_vec(dim),
                    drop_condition: rng.below(tc.p_uncond),
                })
                .collect();
            let mut tape = Tape::new();
            let refs = model.insert(&mut tape);
            let loss = training_loss(&mut tape, &refs, schedule, &batch, &draws)?;
            let value = tape.values(loss)[0];
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {value} at epoch {epoch}; training aborted"
                )));
            }
            tape.backward(loss)?;
            let ids = refs.ids();
            let grads: Vec<&[f64]> = ids
                .iter()
                .map(|id| {
                    tape.grad(*id).ok_or_else(|| {
                        Error::Training("a parameter received no gradient".into())
                    })
                })
                .collect::<Result<_>>()?;
            let mut params = model.params_mut();
            adam.step(&mut params, &grads)?;
            total += value * batch.len() as f64;
        }
        let epoch_loss = total / examples.len() as f64;
        on_epoch(epoch, epoch_loss, model);
        losses.push(epoch_loss);
    }
    Ok(losses)
}

// ---- sampling ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SampleConfig {
    /// Classifier-free guidance weight w; 0 samples the plain conditional.
    pub guidance: f64,
    /// Diffusion indices whose intermediate states should be recorded
    /// (k_max = initial noise, 0 = the returned samples).
    pub snapshots: Vec<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { guidance: 0.0, snapshots: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// n normalized increment vectors, flat [s, 2] each.
    pub increments: Vec<Vec<f64>>,
    /// (k, chain states at k) for each requested snapshot, k descending.
    pub snapshots: Vec<(usize, Vec<Vec<f64>>)>,
}

/// Ancestral sampling: start every chain at N(0, I) and denoise k = K..1
/// with one batched prediction per step. `category` None samples the
/// unconditional model.
pub fn sample(
    model: &Transfusor,
    schedule: &NoiseSchedule,
    category: Option<usize>,
    n: usize,
    cfg: &SampleConfig,
    rng: &mut SeededRng,
) -> Result<SampleOutput> {
    schedule.validate()?;
    if n == 0 {
        return Err(Error::usage("sample", "need at least one chain"));
    }
    if let Some(c) = category {
        if c >= NUM_CATEGORIES {
            return Err(Error::usage(
                "sample",
                format!("category index {c} out of range 0..{NUM_CATEGORIES}"),
            ));
        }
    }
    let k_max = schedule.k_max();
    if let Some(bad) = cfg.snapshots.iter().find(|&&k| k > k_max) {
        return Err(Error::usage(
            "sample",
            format!("snapshot step {bad} beyond k_max {k_max}"),
        ));
    }
    let s = model.config.seq_len;
    let dim = s * 2;
    let mut chains: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(dim)).collect();
    let mut snapshots = Vec::new();
    if cfg.snapshots.contains(&k_max) {
        snapshots.push((k_max, chains.clone()));
    }
    let ks_buf: Vec<usize> = vec![0; n];
    let mut ks = ks_buf;
    let cats_cond = vec![category; n];
    let cats_null = vec![None; n];
    for k in (1..=k_max).rev() {
        let mut tape = Tape::new();
        let refs = model.insert(&mut tape);
        let mut flat = Vec::with_capacity(n * dim);
        for c in &chains {
            flat.extend_from_slice(c);
        }
        let x = tape.constant_from(&[n, s, 2], flat)?;
        ks.fill(k);
        let cond = predict_noise(&mut tape, &refs, x, &ks, &cats_cond)?;
        let eps = if cfg.guidance != 0.0 {
            let uncond = predict_noise(&mut tape, &refs, x, &ks, &cats_null)?;
            guided_noise(tape.values(cond), tape.values(uncond), cfg.guidance)?
        } else {
            tape.values(cond).to_vec()
        };
        for (i, chain) in chains.iter_mut().enumerate() {
            let z = if k > 1 { rng.normal_vec(dim) } else { Vec::new() };
            *chain = reverse_step(schedule, k, chain, &eps[i * dim..(i + 1) * dim], &z)?;
        }
        if cfg.snapshots.contains(&(k - 1)) {
            snapshots.push((k - 1, chains.clone()));
        }
    }
    Ok(SampleOutput { increments: chains, snapshots })
}
