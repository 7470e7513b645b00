//! `key = value` training configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{InitScheme, NetworkSpec, RoundingConfig, MAX_UPDATE_BITS};
use crate::qtensor::RoundingScheme;

/// Piecewise-constant `m_u` over 1-based epochs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MuSchedule {
    entries: Vec<(usize, u32)>,
}

impl MuSchedule {
    pub fn new(entries: Vec<(usize, u32)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("empty m_u schedule".into()));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "m_u schedule epochs must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(e, m)) = entries.iter().find(|(_, m)| !(1..=MAX_UPDATE_BITS).contains(m)) {
            return Err(Error::Config(format!("m_u {m} at epoch {e} outside 1..={MAX_UPDATE_BITS}")));
        }
        Ok(Self { entries })
    }

    pub fn constant(m_u: u32) -> Result<Self> {
        Self::new(vec![(1, m_u)])
    }

    /// `m_u` of the entry with the largest epoch `<= epoch`; the first entry
    /// also covers any earlier epochs.
    pub fn at(&self, epoch: usize) -> u32 {
        self.entries
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .unwrap_or(&self.entries[0])
            .1
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }
}

impl FromStr for MuSchedule {
    type Err = Error;

    /// `"3"` or `"1:5,100:4,150:3"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |part: &str| Error::Config(format!("bad m_u schedule entry `{part}` (expected EPOCH:BITS)"));
        let s = s.trim();
        if let Ok(m) = s.parse::<u32>() {
            return Self::constant(m);
        }
        let entries = s
            .split(',')
            .map(|part| {
                let (e, m) = part.split_once(':').ok_or_else(|| bad(part))?;
                let e = e.trim().parse().map_err(|_| bad(part))?;
                let m = m.trim().parse().map_err(|_| bad(part))?;
                Ok((e, m))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }
}

impl fmt::Display for MuSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(e, m)| format!("{e}:{m}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn for_arch(arch: &str) -> Result<Self> {
        if arch.ends_with("mnist") || arch == "lenet5" {
            Ok(DatasetKind::Mnist)
        } else if arch.ends_with("cifar10") {
            Ok(DatasetKind::Cifar10)
        } else {
            Err(Error::Config(format!("cannot tell which dataset `{arch}` trains on")))
        }
    }

    pub fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainConfig {
    pub arch: String,
    /// Directory holding the dataset files, or a parent with `mnist/` and
    /// `cifar10/` subdirectories.
    pub data: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitScheme,
    pub rounding: RoundingConfig,
    pub mu_schedule: MuSchedule,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
    /// Record elapsed seconds in the metrics file; zero otherwise.
    pub wall_time: bool,
    pub shuffle: bool,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    /// Use only the first N validation samples.
    pub val_limit: Option<usize>,
}

/// Training defaults for each architecture preset.
pub fn preset_defaults(arch: &str) -> (usize, usize, &'static str) {
    match arch {
        "lenet-mnist" | "lenet5" => (20, 256, "3"),
        "mlp-mnist" => (10, 64, "3"),
        "cnn4-cifar10" => (15, 128, "1:4,11:3"),
        _ if arch.starts_with("vgg") => (200, 128, "1:5,101:4,151:3"),
        _ => (10, 64, "3"),
    }
}

impl TrainConfig {
    pub fn for_arch(arch: &str) -> Result<Self> {
        NetworkSpec::preset(arch)?;
        let (epochs, batch_size, mu) = preset_defaults(arch);
        Ok(Self {
            arch: arch.to_string(),
            data: PathBuf::from("data"),
            epochs,
            batch_size,
            seed: 0,
            init: InitScheme::Uniform,
            rounding: RoundingConfig::default(),
            mu_schedule: mu.parse()?,
            eval_every: 1,
            metrics: None,
            checkpoint: None,
            checkpoint_every: 1,
            resume: None,
            wall_time: true,
            shuffle: true,
            train_limit: None,
            val_limit: None,
        })
    }

    pub fn dataset(&self) -> Result<DatasetKind> {
        DatasetKind::for_arch(&self.arch)
    }

    /// Where the dataset files of this config live.
    pub fn data_dir(&self) -> Result<PathBuf> {
        let sub = self.data.join(self.dataset()?.subdir());
        Ok(if sub.is_dir() { sub } else { self.data.clone() })
    }

    /// Builds a config from `key = value` lines, then applies `overrides`
    /// (same keys) on top. The architecture is resolved first so that its
    /// preset supplies the defaults.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut file = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if file.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let mut merged = file;
        for (k, v) in overrides {
            let k = k.replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown override `{k}`")));
            }
            merged.insert(k, v.clone());
        }
        let arch = merged.remove("arch").unwrap_or_else(|| "lenet-mnist".into());
        let mut cfg = Self::for_arch(&arch)?;
        for (k, v) in &merged {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let invalid = |what: &str| Error::Config(format!("{key}: invalid {what} `{value}`"));
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "data" => self.data = PathBuf::from(value),
            "epochs" => self.epochs = value.parse().map_err(|_| invalid("count"))?,
            "batch_size" => {
                self.batch_size = value.parse().map_err(|_| invalid("count"))?;
                if self.batch_size == 0 {
                    return Err(invalid("batch size"));
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| invalid("seed"))?,
            "init" => self.init = value.parse()?,
            "rounding_ae" => self.rounding.activations = parse_scheme(key, value)?,
            "rounding_g" => self.rounding.gradients = parse_scheme(key, value)?,
            "rounding_loss" => self.rounding.loss = parse_scheme(key, value)?,
            "mu_schedule" | "mu" => self.mu_schedule = value.parse()?,
            "eval_every" => {
                self.eval_every = value.parse().map_err(|_| invalid("count"))?;
                if self.eval_every == 0 {
                    return Err(invalid("cadence"));
                }
            }
            "metrics" => self.metrics = path(),
            "checkpoint" => self.checkpoint = path(),
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| invalid("count"))?;
                if self.checkpoint_every == 0 {
                    return Err(invalid("cadence"));
                }
            }
            "resume" => self.resume = path(),
            "wall_time" => self.wall_time = parse_bool(value).ok_or_else(|| invalid("boolean"))?,
            "shuffle" => self.shuffle = parse_bool(value).ok_or_else(|| invalid("boolean"))?,
            "train_limit" => self.train_limit = Some(value.parse().map_err(|_| invalid("count"))?),
            "val_limit" => self.val_limit = Some(value.parse().map_err(|_| invalid("count"))?),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// The file form of this config; parsing it gives the same config.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("arch", self.arch.clone());
        line("data", self.data.display().to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("seed", self.seed.to_string());
        line("init", self.init.to_string());
        line("rounding_ae", self.rounding.activations.to_string());
        line("rounding_g", self.rounding.gradients.to_string());
        line("rounding_loss", self.rounding.loss.to_string());
        line("mu_schedule", self.mu_schedule.to_string());
        line("eval_every", self.eval_every.to_string());
        line("metrics", opt(&self.metrics));
        line("checkpoint", opt(&self.checkpoint));
        line("checkpoint_every", self.checkpoint_every.to_string());
        line("resume", opt(&self.resume));
        line("wall_time", self.wall_time.to_string());
        line("shuffle", self.shuffle.to_string());
        if let Some(n) = self.train_limit {
            line("train_limit", n.to_string());
        }
        if let Some(n) = self.val_limit {
            line("val_limit", n.to_string());
        }
        s
    }
}

const KEYS: &[&str] = &[
    "arch",
    "data",
    "epochs",
    "batch_size",
    "seed",
    "init",
    "rounding_ae",
    "rounding_g",
    "rounding_loss",
    "mu_schedule",
    "mu",
    "eval_every",
    "metrics",
    "checkpoint",
    "checkpoint_every",
    "resume",
    "wall_time",
    "shuffle",
    "train_limit",
    "val_limit",
];

fn parse_scheme(key: &str, value: &str) -> Result<RoundingScheme> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: unknown rounding scheme `{value}`")))
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}
