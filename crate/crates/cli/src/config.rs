//! Run configuration. Three layers, later wins: built-in defaults, a flat
//! `key = value` file passed with --config, then command-line flags. The
//! effective values are echoed into the output directory next to every
//! command's artifacts so a run is reproducible from its own files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use transfusor::data::ExtractionMethod;
use transfusor::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use transfusor::error::{Error, Result};

/// Environment variable naming the default output root when --out is absent.
pub const OUT_ENV: &str = "TRANSFUSOR_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root RNG seed for whatever the command randomizes.
    pub seed: u64,
    /// Window extraction method.
    pub method: ExtractionMethod,
    /// Diffusion steps K.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Chance of training a batch element unconditionally.
    pub p_uncond: f64,
    /// Checkpoint cadence during training, epochs.
    pub checkpoint_every: usize,
    /// Classifier-free guidance weight at sampling time.
    pub guidance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: ExtractionMethod::Fixed150,
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            epochs: 80,
            batch_size: 32,
            learning_rate: 1e-3,
            p_uncond: 0.1,
            checkpoint_every: 25,
            guidance: 0.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("config {key} = {raw:?} failed to parse")))
}

impl RunConfig {
    /// Defaults overlaid with a config file, if one was given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot open config {}: {e}", path.display())))?;
            let map = transfusor::data::parse_kv(&text, &path.display().to_string())?;
            cfg.apply(&map)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (key, raw) in map {
            match key.as_str() {
                "seed" => self.seed = parse_value(key, raw)?,
                "method" => self.method = ExtractionMethod::parse(raw)?,
                "steps" => self.steps = parse_value(key, raw)?,
                "beta_start" => self.beta_start = parse_value(key, raw)?,
                "beta_end" => self.beta_end = parse_value(key, raw)?,
                "epochs" => self.epochs = parse_value(key, raw)?,
                "batch_size" => self.batch_size = parse_value(key, raw)?,
                "learning_rate" => self.learning_rate = parse_value(key, raw)?,
                "p_uncond" => self.p_uncond = parse_value(key, raw)?,
                "checkpoint_every" => self.checkpoint_every = parse_value(key, raw)?,
                "guidance" => self.guidance = parse_value(key, raw)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown config key {other:?}; valid keys: seed, method, steps, \
                         beta_start, beta_end, epochs, batch_size, learning_rate, p_uncond, \
                         checkpoint_every, guidance"
                    )))
                }
            }
        }
        Ok(())
    }

    /// The effective configuration as flat text, with per-command extras
    /// appended; written next to each command's outputs.
    pub fn render(&self, command: &str, extras: &[(String, String)]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {command}");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "method = {}", self.method.name());
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "beta_start = {}", self.beta_start);
        let _ = writeln!(out, "beta_end = {}", self.beta_end);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(out, "p_uncond = {}", self.p_uncond);
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(out, "guidance = {}", self.guidance);
        for (k, v) in extras {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Output root: --out beats the environment variable beats "./out".
pub fn resolve_out(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_without_a_file_and_a_file_overrides_them() {
        let cfg = RunConfig::load(None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.method, ExtractionMethod::Fixed150);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "epochs = 7\nmethod = dynamic\n# comment\n\nguidance = 1.5\n")
            .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.method, ExtractionMethod::Dynamic);
        assert_eq!(cfg.guidance, 1.5);
        assert_eq!(cfg.batch_size, 32, "unset keys keep their defaults");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_the_key_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "epocs = 7\n").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err().to_string();
        assert!(err.contains("epocs"), "{err}");
        assert!(err.contains("valid keys"), "{err}");

        std::fs::write(&path, "epochs = soon\n").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");

        assert!(RunConfig::load(Some(&dir.path().join("absent.conf"))).is_err());
    }

    #[test]
    fn render_echoes_every_field_and_extras() {
        let cfg = RunConfig::default();
        let text = cfg.render("train", &[("corpus".into(), "/tmp/c".into())]);
        assert!(text.starts_with("command = train\n"));
        for key in [
            "seed", "method", "steps", "beta_start", "beta_end", "epochs", "batch_size",
            "learning_rate", "p_uncond", "checkpoint_every", "guidance", "corpus",
        ] {
            assert!(text.contains(&format!("{key} = ")), "missing {key} in {text}");
        }
        // The echo itself parses as a config (minus the command/extra keys).
        let map = transfusor::data::parse_kv(&text, "echo").unwrap();
        assert_eq!(map["epochs"], "80");
    }

    #[test]
    fn out_root_prefers_flag_then_environment() {
        // Avoid mutating the process environment: exercise the flag branch
        // and the default branch, which are environment-independent when the
        // variable is unset.
        let flagged = resolve_out(Some(PathBuf::from("/x/y")));
        assert_eq!(flagged, PathBuf::from("/x/y"));
        if std::env::var_os(OUT_ENV).is_none() {
            assert_eq!(resolve_out(None), PathBuf::from("out"));
        }
    }
}
