//! TOML run configuration.
//!
//! A file only lists what it changes: its tables are merged over the built-in
//! defaults before decoding, and unknown keys are rejected. Errors carry the
//! line of the offending key when it can be found.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PrepConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::geometry::{GridSpec, RorParams};
use crate::registry::Strategies;
use crate::seed::derive_seed;
use crate::synthworld::SynthDatasetSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridChoice {
    Preset(String),
    Custom(GridSpec),
}

impl GridChoice {
    pub fn resolve(&self) -> Result<GridSpec> {
        match self {
            GridChoice::Preset(name) => {
                GridSpec::preset(name).ok_or_else(|| Error::config("prep.grid", format!("unknown grid preset `{name}`")))
            }
            GridChoice::Custom(g) => Ok(*g),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepSection {
    pub grid: GridChoice,
    pub radar_ror: bool,
    pub radar_ror_radius: f64,
    pub radar_ror_min_neighbors: usize,
    pub lidar_ror: bool,
    pub lidar_ror_radius: f64,
    pub lidar_ror_min_neighbors: usize,
}

impl Default for PrepSection {
    fn default() -> Self {
        let d = RorParams::default();
        Self {
            grid: GridChoice::Preset("desk".into()),
            radar_ror: true,
            radar_ror_radius: d.radius,
            radar_ror_min_neighbors: d.min_neighbors,
            lidar_ror: false,
            lidar_ror_radius: d.radius,
            lidar_ror_min_neighbors: d.min_neighbors,
        }
    }
}

impl PrepSection {
    pub fn resolve(&self) -> Result<PrepConfig> {
        let ror = |on: bool, radius: f64, min_neighbors: usize| on.then_some(RorParams { radius, min_neighbors });
        let p = PrepConfig {
            grid: self.grid.resolve()?,
            radar_ror: ror(self.radar_ror, self.radar_ror_radius, self.radar_ror_min_neighbors),
            lidar_ror: ror(self.lidar_ror, self.lidar_ror_radius, self.lidar_ror_min_neighbors),
        };
        p.validate().map_err(|e| rekey(e, "prep"))?;
        Ok(p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Number of seeds per row; seeds are derived from the root seed.
    pub seeds: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub data: DataSection,
    pub prep: PrepSection,
    pub synth: SynthDatasetSpec,
    pub teacher: TrainConfig,
    pub r2r: TrainConfig,
    pub r2l: TrainConfig,
    pub eval: EvalOptions,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            prep: PrepSection::default(),
            synth: SynthDatasetSpec::default(),
            teacher: TrainConfig::teacher(),
            r2r: TrainConfig::default(),
            r2l: TrainConfig {
                mode: "student_r2l".into(),
                use_fdd: false,
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Prefixes a configuration key with its section, unless it already names one.
fn rekey(e: Error, section: &str) -> Error {
    match e {
        Error::Config { key, message } => {
            let leaf = key.strip_prefix("train.").unwrap_or(&key);
            Error::Config {
                key: format!("{section}.{leaf}"),
                message,
            }
        }
        other => other,
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// 1-based line of `dotted` (`section.sub.key`) in `text`, if present.
pub fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, leaf) = match dotted.rsplit_once('.') {
        Some((s, l)) => (s, l),
        None => ("", dotted),
    };
    let key_at = |line: &str| {
        let l = line.trim_start();
        l.strip_prefix(leaf)
            .is_some_and(|rest| rest.trim_start().starts_with('=') || rest.starts_with('.'))
    };
    let mut current = String::new();
    let mut fallback = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == dotted {
                return Some(i + 1);
            }
            continue;
        }
        if key_at(line) {
            if current == section {
                return Some(i + 1);
            }
            fallback.get_or_insert(i + 1);
        }
    }
    fallback
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// A configuration error rendered with its file and line.
fn located(origin: &Path, line: Option<usize>, message: String) -> Error {
    let message = match line {
        Some(l) => format!("line {l}: {message}"),
        None => message,
    };
    Error::format(origin, message)
}

fn first_backticked(s: &str) -> Option<&str> {
    let start = s.find('`')? + 1;
    let len = s[start..].find('`')?;
    Some(&s[start..start + len])
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let user: toml::Table = text.parse::<toml::Table>().map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            located(origin, line, e.message().to_string())
        })?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let line = first_backticked(&msg).and_then(|k| locate_key(text, k));
            located(origin, line, msg)
        })?;
        cfg.apply_seed(cfg.seed);
        cfg.validate().map_err(|e| match e {
            Error::Config { key, message } => {
                located(origin, locate_key(text, &key), format!("invalid `{key}`: {message}"))
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, path)
    }

    /// Sets the root seed and the per-stage seeds derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.teacher.seed = derive_seed(seed, "teacher");
        self.r2r.seed = derive_seed(seed, "r2r");
        self.r2l.seed = derive_seed(seed, "r2l");
    }

    /// Seeds of the ablation runs.
    pub fn ablation_seeds(&self) -> Vec<u64> {
        (0..self.ablate.seeds)
            .map(|i| derive_seed(self.seed, &format!("ablate/{i}")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = Strategies::builtin();
        self.prep.resolve()?;
        self.synth.validate()?;
        for (name, cfg, mode) in [
            ("teacher", &self.teacher, "teacher_l2l"),
            ("r2r", &self.r2r, "student_r2r"),
            ("r2l", &self.r2l, "student_r2l"),
        ] {
            if cfg.mode != mode {
                return Err(Error::config(format!("{name}.mode"), format!("this section trains `{mode}`")));
            }
            cfg.validate(&s).map_err(|e| rekey(e, name))?;
        }
        self.eval.validate()?;
        if self.ablate.seeds == 0 {
            return Err(Error::config("ablate.seeds", "must be at least 1"));
        }
        Ok(())
    }
}
