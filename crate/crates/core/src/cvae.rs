//! Conditional VAE baseline over the same normalized increments the
//! diffusion model trains on. A pooled transformer encoder produces a
//! Gaussian posterior; the decoder broadcasts the latent across sequence
//! positions and reads out increments. Both use the category embedding that
//! the diffusion model uses, with the step half pinned at 0.

use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::nn::{
    self,
    build_condition_embedding, condition_linear, positional_encoding, transformer_block, Affine,
    AffineRefs, CategoryTable, CategoryTableRefs, ConditionLinear, ConditionLinearRefs,
    TransformerBlock, TransformerBlockRefs, NUM_CATEGORIES,
};
use crate::tensor::{AdamState, NodeId, SeededRng, Tape, Tensor};

/// Weight of the KL term against the reconstruction MSE.
pub const KL_WEIGHT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub ff: usize,
    pub category_dim: usize,
    pub time_dim: usize,
    pub latent: usize,
    pub seq_len: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            hidden: 128,
            heads: 4,
            head_dim: 32,
            blocks: 1,
            ff: 256,
            category_dim: 64,
            time_dim: 64,
            latent: 64,
            seq_len: 14,
        }
    }
}

impl CvaeConfig {
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
            ("latent", self.latent),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("cvae dimension {name} must be positive")));
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

/// Encoder: embed -> condition fusion -> positions -> transformer -> mean
/// pool -> mu / logvar heads (zero-initialized, so the untrained posterior
/// is exactly N(0, I)). Decoder: latent broadcast across positions ->
/// condition fusion -> positions -> transformer -> zero-initialized output.
#[derive(Clone, Debug)]
pub struct Cvae {
    pub config: CvaeConfig,
    pub table: CategoryTable,
    pub enc_embed: Affine,
    pub enc_fuse: ConditionLinear,
    pub enc_blocks: Vec<TransformerBlock>,
    pub mu_head: Affine,
    pub logvar_head: Affine,
    pub dec_fuse: ConditionLinear,
    pub dec_blocks: Vec<TransformerBlock>,
    pub dec_out: Affine,
}

#[derive(Clone)]
pub struct CvaeRefs {
    pub table: CategoryTableRefs,
    pub enc_embed: AffineRefs,
    pub enc_fuse: ConditionLinearRefs,
    pub enc_blocks: Vec<TransformerBlockRefs>,
    pub mu_head: AffineRefs,
    pub logvar_head: AffineRefs,
    pub dec_fuse: ConditionLinearRefs,
    pub dec_blocks: Vec<TransformerBlockRefs>,
    pub dec_out: AffineRefs,
    pub time_dim: usize,
    pub latent: usize,
}

impl Cvae {
    pub fn new(config: CvaeConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c_dim = config.condition_dim();
        // Each stack (encoder, decoder) is `config.blocks` deep.
        let residual_scale = 1.0 / (2.0 * config.blocks as f64).sqrt();
        let block = |rng: &mut SeededRng| {
            TransformerBlock::new(
                config.hidden,
                config.heads,
                config.head_dim,
                config.head_dim,
                config.ff,
                residual_scale,
                rng,
            )
        };
        Ok(Cvae {
            table: CategoryTable::new(config.category_dim, rng),
            enc_embed: Affine::new(2, config.hidden, rng),
            enc_fuse: ConditionLinear::new(config.hidden, c_dim, config.hidden, rng),
            enc_blocks: (0..config.blocks).map(|_| block(rng)).collect::<Result<_>>()?,
            mu_head: Affine::zeroed(config.hidden, config.latent),
            logvar_head: Affine::zeroed(config.hidden, config.latent),
            dec_fuse: ConditionLinear::new(config.latent, c_dim, config.hidden, rng),
            dec_blocks: (0..config.blocks).map(|_| block(rng)).collect::<Result<_>>()?,
            dec_out: Affine::zeroed(config.hidden, 2),
            config,
        })
    }

    pub fn insert(&self, tape: &mut Tape) -> CvaeRefs {
        CvaeRefs {
            table: self.table.insert(tape),
            enc_embed: self.enc_embed.insert(tape),
            enc_fuse: self.enc_fuse.insert(tape),
            enc_blocks: self.enc_blocks.iter().map(|b| b.insert(tape)).collect(),
            mu_head: self.mu_head.insert(tape),
            logvar_head: self.logvar_head.insert(tape),
            dec_fuse: self.dec_fuse.insert(tape),
            dec_blocks: self.dec_blocks.iter().map(|b| b.insert(tape)).collect(),
            dec_out: self.dec_out.insert(tape),
            time_dim: self.config.time_dim,
            latent: self.config.latent,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.table.collect("categories", &mut out);
        self.enc_embed.collect("enc_embed", &mut out);
        self.enc_fuse.collect("enc_fuse", &mut out);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.collect(&format!("enc_block{i}"), &mut out);
        }
        self.mu_head.collect("mu_head", &mut out);
        self.logvar_head.collect("logvar_head", &mut out);
        self.dec_fuse.collect("dec_fuse", &mut out);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.collect(&format!("dec_block{i}"), &mut out);
        }
        self.dec_out.collect("dec_out", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.table.collect_mut(&mut out);
        self.enc_embed.collect_mut(&mut out);
        self.enc_fuse.collect_mut(&mut out);
        for b in &mut self.enc_blocks {
            b.collect_mut(&mut out);
        }
        self.mu_head.collect_mut(&mut out);
        self.logvar_head.collect_mut(&mut out);
        self.dec_fuse.collect_mut(&mut out);
        for b in &mut self.dec_blocks {
            b.collect_mut(&mut out);
        }
        self.dec_out.collect_mut(&mut out);
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

impl CvaeRefs {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.table.ids(&mut out);
        self.enc_embed.ids(&mut out);
        self.enc_fuse.ids(&mut out);
        for b in &self.enc_blocks {
            b.ids(&mut out);
        }
        self.mu_head.ids(&mut out);
        self.logvar_head.ids(&mut out);
        self.dec_fuse.ids(&mut out);
        for b in &self.dec_blocks {
            b.ids(&mut out);
        }
        self.dec_out.ids(&mut out);
        out
    }

    pub fn from_ids(config: &CvaeConfig, it: &mut impl Iterator<Item = NodeId>) -> Self {
        CvaeRefs {
            table: CategoryTableRefs::from_ids(it),
            enc_embed: AffineRefs::from_ids(it),
            enc_fuse: ConditionLinearRefs::from_ids(it),
            enc_blocks: (0..config.blocks)
                .map(|_| TransformerBlockRefs::from_ids(config.heads, config.head_dim, it))
                .collect(),
            mu_head: AffineRefs::from_ids(it),
            logvar_head: AffineRefs::from_ids(it),
            dec_fuse: ConditionLinearRefs::from_ids(it),
            dec_blocks: (0..config.blocks)
                .map(|_| TransformerBlockRefs::from_ids(config.heads, config.head_dim, it))
                .collect(),
            dec_out: AffineRefs::from_ids(it),
            time_dim: config.time_dim,
            latent: config.latent,
        }
    }
}

fn category_condition(
    tape: &mut Tape,
    refs: &CvaeRefs,
    categories: &[usize],
) -> Result<NodeId> {
    let cats: Vec<Option<usize>> = categories.iter().map(|&c| Some(c)).collect();
    let steps = vec![0usize; categories.len()];
    build_condition_embedding(tape, &refs.table, &cats, &steps, refs.time_dim)
}

fn add_positions(tape: &mut Tape, h: NodeId) -> Result<NodeId> {
    let (b, s, d) = {
        let sh = tape.shape(h);
        (sh[0], sh[1], sh[2])
    };
    let pos = positional_encoding(s, d)?;
    let mut tiled = Vec::with_capacity(b * s * d);
    for _ in 0..b {
        tiled.extend_from_slice(&pos.values);
    }
    let pos_id = tape.constant_from(&[b, s, d], tiled)?;
    tape.add(h, pos_id)
}

/// Posterior parameters for a batch of increments x [B, s, 2]:
/// (mu, logvar), each [B, latent].
pub fn encode(
    tape: &mut Tape,
    refs: &CvaeRefs,
    x: NodeId,
    categories: &[usize],
) -> Result<(NodeId, NodeId)> {
    let sh = tape.shape(x).to_vec();
    if sh.len() != 3 || sh[2] != 2 {
        return Err(Error::usage(
            "cvae_encode",
            format!("expected [B, s, 2], got {sh:?}"),
        ));
    }
    if categories.len() != sh[0] {
        return Err(Error::usage(
            "cvae_encode",
            format!("batch {} with {} categories", sh[0], categories.len()),
        ));
    }
    let cond = category_condition(tape, refs, categories)?;
    let mut h = refs.enc_embed.apply(tape, x)?;
    h = condition_linear(tape, h, cond, &refs.enc_fuse)?;
    h = add_positions(tape, h)?;
    for block in &refs.enc_blocks {
        h = transformer_block(tape, h, block)?;
    }
    let pooled = tape.mean_axis(h, 1)?;
    let mu = refs.mu_head.apply(tape, pooled)?;
    let logvar = refs.logvar_head.apply(tape, pooled)?;
    Ok((mu, logvar))
}

/// z = mu + exp(logvar / 2) * noise, with `noise` injected so training and
/// tests control the draw.
pub fn reparameterize(
    tape: &mut Tape,
    mu: NodeId,
    logvar: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let half = tape.mul_scalar(logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, noise)?;
    tape.add(mu, scaled)
}

/// Decode latents z [B, latent] into increments [B, s, 2].
pub fn decode(
    tape: &mut Tape,
    refs: &CvaeRefs,
    z: NodeId,
    categories: &[usize],
    seq_len: usize,
) -> Result<NodeId> {
    let sh = tape.shape(z).to_vec();
    if sh.len() != 2 || sh[1] != refs.latent {
        return Err(Error::usage(
            "cvae_decode",
            format!("expected [B, {}], got {sh:?}", refs.latent),
        ));
    }
    if categories.len() != sh[0] {
        return Err(Error::usage(
            "cvae_decode",
            format!("batch {} with {} categories", sh[0], categories.len()),
        ));
    }
    let cond = category_condition(tape, refs, categories)?;
    let rows = tape.repeat_positions(z, seq_len)?;
    let mut h = condition_linear(tape, rows, cond, &refs.dec_fuse)?;
    h = add_positions(tape, h)?;
    for block in &refs.dec_blocks {
        h = transformer_block(tape, h, block)?;
    }
    refs.dec_out.apply(tape, h)
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dimensions, averaged
/// over the batch: 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) / B.
pub fn kl_divergence(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let b = tape.shape(mu)[0];
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let s1 = tape.add(mu2, var)?;
    let s2 = tape.add_scalar(s1, -1.0);
    let s3 = tape.sub(s2, logvar)?;
    let total = tape.sum_all(s3);
    Ok(tape.mul_scalar(total, 0.5 / b as f64))
}

/// Loss nodes for one batch; `total` is what training descends.
pub struct CvaeLoss {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

/// Reconstruction MSE plus KL_WEIGHT times the posterior KL. `noise` holds
/// one [latent] standard-normal draw per example.
pub fn cvae_loss(
    tape: &mut Tape,
    refs: &CvaeRefs,
    batch: &[&TrainingExample],
    noise: &[Vec<f64>],
) -> Result<CvaeLoss> {
    if batch.is_empty() || batch.len() != noise.len() {
        return Err(Error::usage(
            "cvae_loss",
            format!("{} examples vs {} noise draws", batch.len(), noise.len()),
        ));
    }
    let dim = batch[0].deltas.len();
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::usage(
            "cvae_loss",
            format!("flat increment length {dim} is not a positive multiple of 2"),
        ));
    }
    let s = dim / 2;
    let b = batch.len();
    let mut flat = Vec::with_capacity(b * dim);
    let mut cats = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * refs.latent);
    for (ex, n) in batch.iter().zip(noise) {
        if ex.deltas.len() != dim {
            return Err(Error::usage(
                "cvae_loss",
                format!("example has {} values, batch uses {dim}", ex.deltas.len()),
            ));
        }
        if n.len() != refs.latent {
            return Err(Error::usage(
                "cvae_loss",
                format!("noise draw has {} values, latent is {}", n.len(), refs.latent),
            ));
        }
        flat.extend_from_slice(&ex.deltas);
        cats.push(ex.category);
        eps.extend_from_slice(n);
    }
    let x = tape.constant_from(&[b, s, 2], flat)?;
    let (mu, logvar) = encode(tape, refs, x, &cats)?;
    let noise_id = tape.constant_from(&[b, refs.latent], eps)?;
    let z = reparameterize(tape, mu, logvar, noise_id)?;
    let recon = decode(tape, refs, z, &cats, s)?;
    let recon_loss = tape.mse_loss(recon, x)?;
    let kl = kl_divergence(tape, mu, logvar)?;
    let weighted = tape.mul_scalar(kl, KL_WEIGHT);
    let total = tape.add(recon_loss, weighted)?;
    Ok(CvaeLoss { total, recon: recon_loss, kl })
}

#[derive(Clone, Debug)]
pub struct CvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        CvaeTrainConfig { epochs: 80, batch_size: 32, lr: 1e-3 }
    }
}

impl CvaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Adam training loop, mirroring the diffusion trainer: per-epoch mean total
/// loss out, the model passed to `on_epoch` for mid-run checkpoints, abort
/// on non-finite values.
pub fn train_cvae(
    model: &mut Cvae,
    examples: &[TrainingExample],
    tc: &CvaeTrainConfig,
    rng: &mut SeededRng,
    mut on_epoch: impl FnMut(usize, f64, &Cvae),
) -> Result<Vec<f64>> {
    tc.validate()?;
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
            let noise: Vec<Vec<f64>> =
                batch.iter().map(|_| rng.normal_vec(model.config.latent)).collect();
            let mut tape = Tape::new();
            let refs = model.insert(&mut tape);
            let loss = cvae_loss(&mut tape, &refs, &batch, &noise)?;
            let value = tape.values(loss.total)[0];
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {value} at epoch {epoch}; training aborted"
                )));
            }
            tape.backward(loss.total)?;
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

/// Draw n trajectories for one category from the latent prior.
pub fn sample_cvae(
    model: &Cvae,
    category: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::usage("sample_cvae", "need at least one sample"));
    }
    if category >= NUM_CATEGORIES {
        return Err(Error::usage(
            "sample_cvae",
            format!("category index {category} out of range 0..{NUM_CATEGORIES}"),
        ));
    }
    let latent = model.config.latent;
    let s = model.config.seq_len;
    let mut tape = Tape::new();
    let refs = model.insert(&mut tape);
    let z = tape.constant_from(&[n, latent], rng.normal_vec(n * latent))?;
    let out = decode(&mut tape, &refs, z, &vec![category; n], s)?;
    let values = tape.values(out);
    Ok((0..n).map(|i| values[i * s * 2..(i + 1) * s * 2].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::check_gradients;

    fn toy_config() -> CvaeConfig {
        CvaeConfig {
            hidden: 8,
            heads: 2,
            head_dim: 2,
            blocks: 1,
            ff: 8,
            category_dim: 2,
            time_dim: 4,
            latent: 3,
            seq_len: 3,
        }
    }

    fn example(category: usize, deltas: Vec<f64>) -> TrainingExample {
        TrainingExample { category, deltas, origin: [0.0, 0.0] }
    }

    /// Toy model with live (non-zero) heads so gradients and condition
    /// sensitivity reach every path.
    fn live_model(rng: &mut SeededRng) -> Cvae {
        let config = toy_config();
        let mut m = Cvae::new(config.clone(), rng).unwrap();
        m.mu_head = Affine::new(config.hidden, config.latent, rng);
        m.logvar_head = Affine::new(config.hidden, config.latent, rng);
        m.dec_out = Affine::new(config.hidden, 2, rng);
        m
    }

    #[test]
    fn kl_matches_closed_form_cases() {
        let mut tape = Tape::new();
        // mu = 0, logvar = 0: KL = 0.
        let mu0 = tape.constant_from(&[1, 2], vec![0.0, 0.0]).unwrap();
        let lv0 = tape.constant_from(&[1, 2], vec![0.0, 0.0]).unwrap();
        let kl0 = kl_divergence(&mut tape, mu0, lv0).unwrap();
        assert_eq!(tape.values(kl0)[0], 0.0);
        // mu = 1, logvar = 0: KL = 0.5 per dimension.
        let mu1 = tape.constant_from(&[1, 1], vec![1.0]).unwrap();
        let lv1 = tape.constant_from(&[1, 1], vec![0.0]).unwrap();
        let kl1 = kl_divergence(&mut tape, mu1, lv1).unwrap();
        assert!((tape.values(kl1)[0] - 0.5).abs() < 1e-15);
        // mu = 0, var = 2: KL = (2 - 1 - ln 2) / 2.
        let mu2 = tape.constant_from(&[1, 1], vec![0.0]).unwrap();
        let lv2 = tape.constant_from(&[1, 1], vec![2.0f64.ln()]).unwrap();
        let kl2 = kl_divergence(&mut tape, mu2, lv2).unwrap();
        let want = (2.0 - 1.0 - 2.0f64.ln()) / 2.0;
        assert!((tape.values(kl2)[0] - want).abs() < 1e-15);
        // Batch averaging: two copies of the mu = 1 case still give 0.5.
        let mu3 = tape.constant_from(&[2, 1], vec![1.0, 1.0]).unwrap();
        let lv3 = tape.constant_from(&[2, 1], vec![0.0, 0.0]).unwrap();
        let kl3 = kl_divergence(&mut tape, mu3, lv3).unwrap();
        assert!((tape.values(kl3)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reparameterization_is_mu_plus_scaled_noise() {
        let mut tape = Tape::new();
        let mu = tape.constant_from(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let lv = tape.constant_from(&[1, 3], vec![0.0, 0.0, 2.0f64.ln()]).unwrap();
        let zero = tape.constant_from(&[1, 3], vec![0.0; 3]).unwrap();
        let z0 = reparameterize(&mut tape, mu, lv, zero).unwrap();
        assert_eq!(tape.values(z0), tape.values(mu));
        let eps = tape.constant_from(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let z1 = reparameterize(&mut tape, mu, lv, eps).unwrap();
        let got = tape.values(z1);
        assert!((got[0] - 2.0).abs() < 1e-15);
        assert!((got[1] + 1.0).abs() < 1e-15);
        assert!((got[2] - (0.5 + 2.0f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn untrained_model_has_exact_mean_square_loss_and_zero_kl() {
        let mut rng = SeededRng::new(3);
        let model = Cvae::new(toy_config(), &mut rng).unwrap();
        let examples = vec![
            example(0, vec![1.0, -1.0, 2.0, 0.0, -2.0, 0.5]),
            example(5, vec![0.5, 0.5, -0.5, 1.5, 0.0, -1.0]),
        ];
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let noise = vec![rng.normal_vec(3), rng.normal_vec(3)];
        let mut tape = Tape::new();
        let refs = model.insert(&mut tape);
        let loss = cvae_loss(&mut tape, &refs, &batch, &noise).unwrap();
        // Zeroed posterior heads: mu = logvar = 0, KL = 0 exactly.
        assert_eq!(tape.values(loss.kl)[0], 0.0);
        // Zeroed decoder output: reconstruction is 0, so MSE is the mean
        // square of the inputs.
        let want: f64 = examples
            .iter()
            .flat_map(|e| e.deltas.iter())
            .map(|v| v * v)
            .sum::<f64>()
            / 12.0;
        assert!((tape.values(loss.recon)[0] - want).abs() < 1e-12);
        assert!((tape.values(loss.total)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(9);
        let config = toy_config();
        let model = live_model(&mut rng);
        let examples = vec![example(2, rng.normal_vec(6)), example(10, rng.normal_vec(6))];
        let noise = vec![rng.normal_vec(3), rng.normal_vec(3)];
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let inputs: Vec<Tensor> =
            model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        check_gradients(
            |tape, ids| {
                let refs = CvaeRefs::from_ids(&config, &mut ids.iter().copied());
                cvae_loss(tape, &refs, &batch, &noise).unwrap().total
            },
            &inputs,
            1e-4,
            1e-3,
        );
    }

    #[test]
    fn named_params_align_with_params_mut_order() {
        let mut rng = SeededRng::new(4);
        let mut model = Cvae::new(toy_config(), &mut rng).unwrap();
        let names: Vec<String> =
            model.named_params().iter().map(|(n, _)| n.clone()).collect();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        let n = names.len();
        {
            let mut params = model.params_mut();
            assert_eq!(params.len(), n);
            for (i, p) in params.iter_mut().enumerate() {
                p.values.fill(i as f64);
            }
        }
        for (i, (name, t)) in model.named_params().iter().enumerate() {
            assert!(t.values.iter().all(|&v| v == i as f64), "parameter {name} out of order");
        }
        let mut tape = Tape::new();
        let ids = model.insert(&mut tape).ids();
        assert_eq!(ids.len(), n);
        for (i, id) in ids.iter().enumerate() {
            assert!(tape.values(*id).iter().all(|&v| v == i as f64));
        }
    }

    #[test]
    fn restore_params_reproduces_another_model_exactly() {
        let model = live_model(&mut SeededRng::new(6));
        let entries: Vec<nn::ParamEntry> = model
            .named_params()
            .iter()
            .map(|(n, t)| nn::ParamEntry {
                name: n.clone(),
                shape: t.shape.clone(),
                values: t.values.clone(),
            })
            .collect();
        let mut other = Cvae::new(toy_config(), &mut SeededRng::new(31)).unwrap();
        other.restore_params(&entries).unwrap();
        for ((na, ta), (nb, tb)) in model.named_params().iter().zip(other.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values, tb.values);
        }
        assert!(other.restore_params(&entries[..entries.len() - 1]).is_err());
    }

    #[test]
    fn training_overfits_a_tiny_constant_corpus() {
        let mut rng = SeededRng::new(12);
        let mut model = Cvae::new(toy_config(), &mut rng).unwrap();
        let examples: Vec<TrainingExample> = (0..4)
            .map(|_| example(2, vec![0.5, -0.25, 0.5, -0.25, 0.5, -0.25]))
            .collect();
        let tc = CvaeTrainConfig { epochs: 60, batch_size: 4, lr: 3e-3 };
        let losses = train_cvae(&mut model, &examples, &tc, &mut rng, |_, _, _| {}).unwrap();
        assert_eq!(losses.len(), 60);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(
            losses[59] < 0.4 * losses[0],
            "no progress: first {} last {}",
            losses[0],
            losses[59]
        );
    }

    #[test]
    fn non_finite_loss_aborts_training_without_touching_parameters() {
        let mut rng = SeededRng::new(13);
        let mut model = Cvae::new(toy_config(), &mut rng).unwrap();
        let before: Vec<Vec<f64>> =
            model.named_params().iter().map(|(_, t)| t.values.clone()).collect();
        let examples = vec![example(0, vec![f64::NAN; 6])];
        let tc = CvaeTrainConfig { epochs: 2, batch_size: 1, lr: 1e-3 };
        let err = train_cvae(&mut model, &examples, &tc, &mut rng, |_, _, _| {}).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
        let after: Vec<Vec<f64>> =
            model.named_params().iter().map(|(_, t)| t.values.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sampling_is_deterministic_and_category_sensitive() {
        let mut rng = SeededRng::new(14);
        let model = live_model(&mut rng);
        let a = sample_cvae(&model, 3, 4, &mut SeededRng::new(80)).unwrap();
        let b = sample_cvae(&model, 3, 4, &mut SeededRng::new(80)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|s| s.len() == 6));
        let other = sample_cvae(&model, 8, 4, &mut SeededRng::new(80)).unwrap();
        assert_ne!(a, other);
        assert!(sample_cvae(&model, NUM_CATEGORIES, 1, &mut SeededRng::new(1)).is_err());
        assert!(sample_cvae(&model, 0, 0, &mut SeededRng::new(1)).is_err());
    }
}
