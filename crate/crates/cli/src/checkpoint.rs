//! Binary model checkpoints. Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "TRSF"
//! version u32
//! kind    u8       0 = transfusor, 1 = cvae
//! meta    u32 byte length + UTF-8 flat `key = value` lines
//! params  u32 count, then per parameter:
//!           u32 name length + UTF-8 name
//!           u32 rank + rank extents (u32 each)
//!           product-of-extents values (f32 each)
//! ```
//!
//! Compute stays f64; storage quantizes to f32, halving file size. The
//! metadata block carries everything needed to rebuild the model and its
//! sampling context: architecture dimensions, noise schedule, normalization
//! stats, seed and the fingerprint of the corpus it was trained on.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use transfusor::cvae::{Cvae, CvaeConfig};
use transfusor::data::{write_atomic, NormStats, MANIFEST_FILE};
use transfusor::diffusion::{ModelConfig, NoiseSchedule, Transfusor};
use transfusor::error::{Error, Result};
use transfusor::nn::ParamEntry;
use transfusor::tensor::SeededRng;

pub const MAGIC: [u8; 4] = *b"TRSF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Transfusor,
    Cvae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transfusor => "transfusor",
            ModelKind::Cvae => "cvae",
        }
    }

    fn byte(self) -> u8 {
        match self {
            ModelKind::Transfusor => 0,
            ModelKind::Cvae => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ModelKind::Transfusor),
            1 => Ok(ModelKind::Cvae),
            other => Err(Error::Format(format!("unknown model kind byte {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata is missing {key:?}")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| {
            Error::Format(format!("checkpoint metadata {key} = {raw:?} failed to parse"))
        })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} of {n} exceeds the u32 format limit")))
}

pub fn encode(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = String::new();
    for (k, v) in &cp.meta {
        meta.push_str(&format!("{k} = {v}\n"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cp.kind.byte());
    out.extend_from_slice(&u32_len(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&u32_len(cp.params.len(), "parameter count")?.to_le_bytes());
    for p in &cp.params {
        let expected: usize = p.shape.iter().product();
        if p.values.len() != expected {
            return Err(Error::Format(format!(
                "parameter {} has {} values but shape {:?}",
                p.name,
                p.values.len(),
                p.shape
            )));
        }
        out.extend_from_slice(&u32_len(p.name.len(), "parameter name length")?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&u32_len(p.shape.len(), "parameter rank")?.to_le_bytes());
        for &e in &p.shape {
            out.extend_from_slice(&u32_len(e, "parameter extent")?.to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: magic {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let kind = ModelKind::from_byte(r.u8()?)?;
    let meta_len = r.u32()? as usize;
    let meta_text = r.string(meta_len, "metadata block")?;
    let meta = transfusor::data::parse_kv(&meta_text, "checkpoint metadata")?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len, "parameter name")?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(ParamEntry { name, shape, values });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes after the last parameter",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { kind, meta, params })
}

pub fn save(path: &Path, cp: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(cp)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}

/// SHA-256 of the corpus manifest, in hex. Binds a checkpoint to the exact
/// corpus (and thus normalization stats) it was trained on.
pub fn corpus_fingerprint(corpus_dir: &Path) -> Result<String> {
    let path = corpus_dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

// ---- model conversions -----------------------------------------------------------

fn entries_of(named: Vec<(String, &transfusor::tensor::Tensor)>) -> Vec<ParamEntry> {
    named
        .into_iter()
        .map(|(name, t)| ParamEntry { name, shape: t.shape.clone(), values: t.values.clone() })
        .collect()
}

fn insert<K: Display>(meta: &mut BTreeMap<String, String>, key: &str, value: K) {
    meta.insert(key.to_string(), value.to_string());
}

fn norm_to_meta(meta: &mut BTreeMap<String, String>, norm: &NormStats) {
    insert(meta, "norm.mean_x", norm.mean[0]);
    insert(meta, "norm.mean_y", norm.mean[1]);
    insert(meta, "norm.std_x", norm.std[0]);
    insert(meta, "norm.std_y", norm.std[1]);
    insert(meta, "norm.degenerate_x", norm.degenerate[0]);
    insert(meta, "norm.degenerate_y", norm.degenerate[1]);
}

fn norm_from_meta(cp: &Checkpoint) -> Result<NormStats> {
    Ok(NormStats {
        mean: [cp.get_parsed("norm.mean_x")?, cp.get_parsed("norm.mean_y")?],
        std: [cp.get_parsed("norm.std_x")?, cp.get_parsed("norm.std_y")?],
        degenerate: [cp.get_parsed("norm.degenerate_x")?, cp.get_parsed("norm.degenerate_y")?],
    })
}

/// Schedule parameters as passed to `NoiseSchedule::linear`; rebuilding from
/// these reproduces the training-time betas exactly.
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

pub fn transfusor_checkpoint(
    model: &Transfusor,
    sp: &ScheduleParams,
    norm: &NormStats,
    seed: u64,
    fingerprint: &str,
) -> Checkpoint {
    let mut meta = BTreeMap::new();
    insert(&mut meta, "model", ModelKind::Transfusor.name());
    insert(&mut meta, "seed", seed);
    insert(&mut meta, "corpus_fingerprint", fingerprint);
    insert(&mut meta, "schedule.steps", sp.steps);
    insert(&mut meta, "schedule.beta_start", sp.beta_start);
    insert(&mut meta, "schedule.beta_end", sp.beta_end);
    norm_to_meta(&mut meta, norm);
    let c = &model.config;
    insert(&mut meta, "arch.hidden", c.hidden);
    insert(&mut meta, "arch.heads", c.heads);
    insert(&mut meta, "arch.head_dim", c.head_dim);
    insert(&mut meta, "arch.blocks", c.blocks);
    insert(&mut meta, "arch.ff", c.ff);
    insert(&mut meta, "arch.category_dim", c.category_dim);
    insert(&mut meta, "arch.time_dim", c.time_dim);
    insert(&mut meta, "arch.bottleneck", c.bottleneck);
    insert(&mut meta, "arch.seq_len", c.seq_len);
    Checkpoint {
        kind: ModelKind::Transfusor,
        meta,
        params: entries_of(model.named_params()),
    }
}

pub fn transfusor_from_checkpoint(cp: &Checkpoint) -> Result<(Transfusor, NoiseSchedule, NormStats)> {
    if cp.kind != ModelKind::Transfusor {
        return Err(Error::usage(
            "checkpoint",
            format!("expected a transfusor checkpoint, found {}", cp.kind.name()),
        ));
    }
    let config = ModelConfig {
        hidden: cp.get_parsed("arch.hidden")?,
        heads: cp.get_parsed("arch.heads")?,
        head_dim: cp.get_parsed("arch.head_dim")?,
        blocks: cp.get_parsed("arch.blocks")?,
        ff: cp.get_parsed("arch.ff")?,
        category_dim: cp.get_parsed("arch.category_dim")?,
        time_dim: cp.get_parsed("arch.time_dim")?,
        bottleneck: cp.get_parsed("arch.bottleneck")?,
        seq_len: cp.get_parsed("arch.seq_len")?,
    };
    let schedule = NoiseSchedule::linear(
        cp.get_parsed("schedule.steps")?,
        cp.get_parsed("schedule.beta_start")?,
        cp.get_parsed("schedule.beta_end")?,
    )?;
    let norm = norm_from_meta(cp)?;
    // The freshly initialized weights are immediately overwritten.
    let mut model = Transfusor::new(config, &mut SeededRng::new(0))?;
    model.restore_params(&cp.params)?;
    Ok((model, schedule, norm))
}

pub fn cvae_checkpoint(model: &Cvae, norm: &NormStats, seed: u64, fingerprint: &str) -> Checkpoint {
    let mut meta = BTreeMap::new();
    insert(&mut meta, "model", ModelKind::Cvae.name());
    insert(&mut meta, "seed", seed);
    insert(&mut meta, "corpus_fingerprint", fingerprint);
    norm_to_meta(&mut meta, norm);
    let c = &model.config;
    insert(&mut meta, "arch.hidden", c.hidden);
    insert(&mut meta, "arch.heads", c.heads);
    insert(&mut meta, "arch.head_dim", c.head_dim);
    insert(&mut meta, "arch.blocks", c.blocks);
    insert(&mut meta, "arch.ff", c.ff);
    insert(&mut meta, "arch.category_dim", c.category_dim);
    insert(&mut meta, "arch.time_dim", c.time_dim);
    insert(&mut meta, "arch.latent", c.latent);
    insert(&mut meta, "arch.seq_len", c.seq_len);
    Checkpoint {
        kind: ModelKind::Cvae,
        meta,
        params: entries_of(model.named_params()),
    }
}

pub fn cvae_from_checkpoint(cp: &Checkpoint) -> Result<(Cvae, NormStats)> {
    if cp.kind != ModelKind::Cvae {
        return Err(Error::usage(
            "checkpoint",
            format!("expected a cvae checkpoint, found {}", cp.kind.name()),
        ));
    }
    let config = CvaeConfig {
        hidden: cp.get_parsed("arch.hidden")?,
        heads: cp.get_parsed("arch.heads")?,
        head_dim: cp.get_parsed("arch.head_dim")?,
        blocks: cp.get_parsed("arch.blocks")?,
        ff: cp.get_parsed("arch.ff")?,
        category_dim: cp.get_parsed("arch.category_dim")?,
        time_dim: cp.get_parsed("arch.time_dim")?,
        latent: cp.get_parsed("arch.latent")?,
        seq_len: cp.get_parsed("arch.seq_len")?,
    };
    let norm = norm_from_meta(cp)?;
    let mut model = Cvae::new(config, &mut SeededRng::new(0))?;
    model.restore_params(&cp.params)?;
    Ok((model, norm))
}
