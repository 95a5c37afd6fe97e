//! Flat `section.key = value` configuration format.
//!
//! ```text
//! # comment
//! seed = 7
//! gen.height = 64
//! distill.beta1 = 0.6
//! ```
//!
//! Parsing is strict: unknown sections or keys, duplicate keys and
//! malformed values are errors. [`RunConfig::to_text`] writes every key in a
//! fixed order so an echoed config is byte-stable.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evalkit::{AblationSettings, BenchSettings, EvalSettings};
use crate::scenegen::GenConfig;
use crate::trainer::{DistillSettings, TrainConfig};

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn format_value(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn format_value(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

/// One `section.*` block of the config file.
pub trait KvSection {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

pub(crate) fn parse_field<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_value(value)
        .ok_or_else(|| Error::Config(format!("invalid value for {key}: {value:?}")))
}

/// Implements [`KvSection`] over the listed fields, keyed by field name.
macro_rules! kv_section {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::KvSection for $ty {
            fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::config::parse_field(key, value)?;
                        Ok(())
                    })*
                    _ => Err($crate::error::Error::Config(format!("unknown key {key:?}"))),
                }
            }
            fn entries(&self) -> Vec<(&'static str, String)> {
                use $crate::config::ConfigValue;
                vec![$((stringify!($field), self.$field.format_value())),*]
            }
        }
    };
}
pub(crate) use kv_section;

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub gen: GenConfig,
    pub pretrain: TrainConfig,
    pub distill: DistillSettings,
    pub eval: EvalSettings,
    pub ablate: AblationSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            gen: GenConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            distill: DistillSettings::default(),
            eval: EvalSettings::default(),
            ablate: AblationSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "TCSKD_OUT_DIR";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| {
                    Error::Config(format!("line {}: expected key = value", lineno + 1))
                })?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.') {
            None => match key {
                "seed" => self.seed = parse_field(key, value)?,
                "out_dir" => self.out_dir = PathBuf::from(value),
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
            Some((section, field)) => {
                let s: &mut dyn KvSection = match section {
                    "gen" => &mut self.gen,
                    "pretrain" => &mut self.pretrain,
                    "distill" => &mut self.distill,
                    "eval" => &mut self.eval,
                    "ablate" => &mut self.ablate,
                    "bench" => &mut self.bench,
                    _ => return Err(Error::Config(format!("unknown section {section:?}"))),
                };
                s.set(field, value).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{section}: {m}")),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.pretrain.validate()?;
        self.distill.validate()?;
        self.ablate.validate()?;
        self.bench.validate()?;
        if !self.gen.height.is_multiple_of(2 * self.distill.tgpd.patch)
            || !self.gen.width.is_multiple_of(2 * self.distill.tgpd.patch)
        {
            return Err(Error::Config(format!(
                "grid {}x{} must be divisible by twice the patch size {}",
                self.gen.height, self.gen.width, self.distill.tgpd.patch
            )));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        let sections: [(&str, &dyn KvSection); 6] = [
            ("gen", &self.gen),
            ("pretrain", &self.pretrain),
            ("distill", &self.distill),
            ("eval", &self.eval),
            ("ablate", &self.ablate),
            ("bench", &self.bench),
        ];
        for (name, s) in sections {
            for (k, v) in s.entries() {
                let _ = writeln!(out, "{name}.{k} = {v}");
            }
        }
        out
    }

    /// `out_dir`, unless overridden by [`OUT_DIR_ENV`].
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone())
    }
}
