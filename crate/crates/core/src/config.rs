//! Run configuration: named profiles, `key = value` files and overrides.
//!
//! Resolution order is profile defaults, then the config file, then
//! command-line overrides; the last writer wins.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::CrpConfig;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Single-core scale: small sets, narrow networks.
    MogDesk,
    /// Mixture-of-Gaussians settings at full size.
    MogFull,
    /// Instance discrimination over an embedding file.
    Embedding,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mog-desk" => Ok(Self::MogDesk),
            "mog-full" => Ok(Self::MogFull),
            "embedding" => Ok(Self::Embedding),
            other => Err(Error::Config(format!("unknown profile `{other}` (mog-desk | mog-full | embedding)"))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Self::MogDesk => "mog-desk",
            Self::MogFull => "mog-full",
            Self::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub crp: CrpConfig,
    /// Standard deviation of the mixture centroids.
    pub sigma: f64,
    /// Noise scale of the augmented copies in discrimination episodes.
    pub aug_std: f64,
    pub embeddings: Option<PathBuf>,
    pub test_sets: usize,
    pub test_n: usize,
    /// Permutations per set for SDPP.
    pub num_perms: usize,
    pub num_samples: usize,
    pub top_k: usize,
    /// Seed of the held-out sets, independent of the training seed.
    pub test_seed: u64,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut train = TrainConfig::default();
        let (encoder, crp, sigma, test_sets, test_n, num_perms) = match profile {
            Profile::MogDesk => {
                train.iterations = 2000;
                train.batch_size = 32;
                train.lr_init = 2e-3;
                let mut enc = EncoderConfig::desk(2);
                enc.input_scale = 0.1;
                let crp = CrpConfig { alpha: 6.0, n_min: 30, n_max: 80, ..CrpConfig::default() };
                (enc, crp, 10.0, 200, 60, 100)
            }
            Profile::MogFull => {
                let mut enc = EncoderConfig::standard(2);
                enc.input_scale = 0.1;
                let crp = CrpConfig { alpha: 6.0, ..CrpConfig::default() };
                (enc, crp, 10.0, 100, 300, 500)
            }
            Profile::Embedding => {
                let crp = CrpConfig { alpha: 1.0, ..CrpConfig::default() };
                (EncoderConfig::standard(384), crp, 10.0, 100, 300, 500)
            }
        };
        Self {
            profile,
            train,
            encoder,
            crp,
            sigma,
            aug_std: 0.05,
            embeddings: None,
            test_sets,
            test_n,
            num_perms,
            num_samples: 500,
            top_k: 100,
            test_seed: 1_000_003,
        }
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn widths(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|w| num(key, w.trim())).collect()
        }
        if self.train.set(key, value)? {
            return Ok(());
        }
        let e = &mut self.encoder;
        match key {
            "profile" => {
                let p: Profile = value.parse()?;
                if p != self.profile {
                    return Err(Error::Config(format!(
                        "`profile = {value}` must come first (already resolved as {})",
                        self.profile.name()
                    )));
                }
            }
            "d_x" => e.d_x = num(key, value)?,
            "d_h" => e.d_h = num(key, value)?,
            "d_g" => e.d_g = num(key, value)?,
            "d_u" => e.d_u = num(key, value)?,
            "h_hidden" => e.h_hidden = widths(key, value)?,
            "g_hidden" => e.g_hidden = widths(key, value)?,
            "u_hidden" => e.u_hidden = widths(key, value)?,
            "f_hidden" => e.f_hidden = widths(key, value)?,
            "activation" => e.activation = value.parse()?,
            "online_mode" => e.online_mode = num(key, value)?,
            "input_scale" => e.input_scale = num(key, value)?,
            "alpha" => self.crp.alpha = num(key, value)?,
            "n_min" => self.crp.n_min = num(key, value)?,
            "n_max" => self.crp.n_max = num(key, value)?,
            "fixed_k" => self.crp.fixed_k = if value == "none" { None } else { Some(num(key, value)?) },
            "max_rejections" => self.crp.max_rejections = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "aug_std" => self.aug_std = num(key, value)?,
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            "test_sets" => self.test_sets = num(key, value)?,
            "test_n" => self.test_n = num(key, value)?,
            "num_perms" => self.num_perms = num(key, value)?,
            "num_samples" => self.num_samples = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "test_seed" => self.test_seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.crp.validate()?;
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.aug_std >= 0.0) {
            return Err(Error::Config("aug_std must be non-negative".into()));
        }
        if self.test_n == 0 {
            return Err(Error::Config("test_n must be >= 1".into()));
        }
        if self.top_k == 0 || self.num_samples < self.top_k {
            return Err(Error::Config("need num_samples >= top_k >= 1".into()));
        }
        Ok(())
    }

    /// Profile defaults, then `file` entries, then `overrides`.
    pub fn resolve(profile: Option<Profile>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let entries = match file {
            Some(path) => parse_kv(&std::fs::read_to_string(path)?, path)?,
            None => Vec::new(),
        };
        let from_file = entries.iter().find(|(_, k, _)| k == "profile").map(|(_, _, v)| v.parse()).transpose()?;
        let mut cfg = Self::profile(profile.or(from_file).unwrap_or(Profile::MogDesk));
        for (line, key, value) in &entries {
            if key == "profile" {
                continue;
            }
            cfg.set(key, value).map_err(|e| Error::Parse {
                path: file.map(Path::to_path_buf).unwrap_or_default(),
                line: *line,
                msg: e.to_string(),
            })?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment. Returns 1-based line
/// numbers with each entry.
pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: msg.to_string() };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(err("malformed key"));
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let text = "# header\n\niterations = 10  # trailing\nobjective=ncp-baseline\n";
        let kv = parse_kv(text, Path::new("c.cfg")).unwrap();
        assert_eq!(kv, vec![(3, "iterations".into(), "10".into()), (4, "objective".into(), "ncp-baseline".into())]);
        let err = parse_kv("a = 1\nnonsense\n", Path::new("c.cfg")).unwrap_err().to_string();
        assert!(err.contains("c.cfg:2"), "{err}");
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "profile = mog-desk\nbatch_size = 4\nseed = 3\nh_hidden = 8, 8\n").unwrap();
        let cfg = RunConfig::resolve(None, Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.encoder.h_hidden, vec![8, 8]);
        assert_eq!(cfg.profile, Profile::MogDesk);

        std::fs::write(&path, "batch_size = 4\nbogus = 1\n").unwrap();
        let err = RunConfig::resolve(None, Some(&path), &[]).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn every_train_field_is_addressable() {
        let mut cfg = RunConfig::profile(Profile::MogDesk);
        for (k, v) in [
            ("iterations", "7"),
            ("batch_size", "3"),
            ("beta", "0.5"),
            ("delta", "0.2"),
            ("lambda", "0.3"),
            ("lr_init", "0.01"),
            ("lr_min", "0.001"),
            ("seed", "4"),
            ("objective", "ncp-baseline"),
            ("eval_every", "2"),
            ("checkpoint_path", "ck.bin"),
            ("patience", "5"),
            ("selection_key", "mc"),
        ] {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.patience, Some(5));
        assert_eq!(cfg.train.checkpoint_path, Some(PathBuf::from("ck.bin")));
        cfg.validate().unwrap();
        assert!(cfg.set("beta", "x").is_err());
    }

    #[test]
    fn profiles_validate() {
        for p in [Profile::MogDesk, Profile::MogFull, Profile::Embedding] {
            RunConfig::profile(p).validate().unwrap();
            assert_eq!(p.name().parse::<Profile>().unwrap(), p);
        }
    }
}
