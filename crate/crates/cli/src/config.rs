//! Run configuration files and their validation.
//!
//! Syntax and type errors come from the TOML parser with their position;
//! range checks are anchored to the line that sets the offending key.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sbs_core::baselines::{OracleFixture, Prop1Config};
use sbs_core::{
    gaussian_blobs, BlobsConfig, Dataset, Error as CoreError, ModelConfig, SearchRunConfig,
};

use crate::CliError;

/// A configuration file and its text.
pub struct Source {
    pub path: PathBuf,
    pub text: String,
}

impl Source {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("{}: cannot read config: {e}", path.display()))
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            text,
        })
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        toml::from_str(&self.text).map_err(|e| {
            let at = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(&self.text, span.start);
                    format!("{}:{line}:{col}", self.path.display())
                }
                None => self.path.display().to_string(),
            };
            CliError::Validation(format!("{at}: {}", e.message().trim_end()))
        })
    }

    /// Validation error at the line that sets `table.key`, or at the file
    /// when the key is left at its default.
    pub fn invalid(
        &self,
        table: Option<&str>,
        key: &str,
        detail: impl std::fmt::Display,
    ) -> CliError {
        let shown = match table {
            Some(t) => format!("{t}.{key}"),
            None => key.to_string(),
        };
        let at = match key_line(&self.text, table, key) {
            Some(line) => format!("{}:{line}", self.path.display()),
            None => self.path.display().to_string(),
        };
        CliError::Validation(format!("{at}: invalid `{shown}`: {detail}"))
    }

    /// Map a core validation error onto the table holding its field.
    pub fn core_invalid(&self, table: Option<&str>, err: CoreError) -> CliError {
        match err {
            CoreError::InvalidArgument { name, detail } => self.invalid(table, name, detail),
            other => CliError::Validation(format!("{}: {other}", self.path.display())),
        }
    }

    /// Resolve a path written in the config against the config's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// 1-based line of `key = ...` inside `[table]` (or at top level).
pub fn key_line(text: &str, table: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = Some(
                line.trim_matches(|c| c == '[' || c == ']')
                    .trim()
                    .to_string(),
            );
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else {
            continue;
        };
        let lhs = lhs.trim();
        let hit = match (table, current.as_deref()) {
            (None, None) => lhs == key,
            (Some(t), Some(c)) => c == t && lhs == key,
            (Some(t), None) => lhs == format!("{t}.{key}"),
            (None, Some(_)) => false,
        };
        if hit {
            return Some(i + 1);
        }
    }
    None
}

/// Where the samples come from: Gaussian blobs, or a binary dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub spread: f64,
    /// Dataset file; replaces the blobs when set.
    pub file: Option<PathBuf>,
    /// Blob seed; the run seed when unset.
    pub seed: Option<u64>,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let b = BlobsConfig::default();
        Self {
            samples: b.samples,
            dim: b.dim,
            classes: b.classes,
            spread: b.spread,
            file: None,
            seed: None,
            train_fraction: 0.8,
        }
    }
}

impl DataSection {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        let t = Some("data");
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(src.invalid(
                t,
                "train_fraction",
                format!("must lie in (0, 1), got {}", self.train_fraction),
            ));
        }
        if self.file.is_some() {
            return Ok(());
        }
        if self.samples < 2 {
            return Err(src.invalid(t, "samples", "need at least 2 samples"));
        }
        if self.dim == 0 {
            return Err(src.invalid(t, "dim", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(src.invalid(t, "classes", "need at least 2 classes"));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(src.invalid(
                t,
                "spread",
                format!("must be a positive number, got {}", self.spread),
            ));
        }
        Ok(())
    }

    /// Train and evaluation splits.
    pub fn load(&self, src: &Source, run_seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
        let data = match &self.file {
            Some(f) => Dataset::read_binary(&src.resolve(f))?,
            None => gaussian_blobs(
                &BlobsConfig {
                    samples: self.samples,
                    dim: self.dim,
                    classes: self.classes,
                    spread: self.spread,
                },
                self.seed.unwrap_or(run_seed),
            )?,
        };
        let (train, eval) = data.split(self.train_fraction);
        if eval.is_empty() {
            anyhow::bail!(
                "train_fraction {} leaves no evaluation samples",
                self.train_fraction
            );
        }
        Ok((train, eval))
    }
}

fn validate_model(src: &Source, m: &ModelConfig) -> Result<(), CliError> {
    if m.hidden.contains(&0) {
        return Err(src.invalid(Some("model"), "hidden", "layer widths must be positive"));
    }
    if let Some(b) = m.pin_first_last {
        if !(1..=sbs_core::FULL_PRECISION_BITS).contains(&b) {
            return Err(src.invalid(
                Some("model"),
                "pin_first_last",
                format!("{b} is not a bitwidth"),
            ));
        }
    }
    Ok(())
}

fn validate_search(src: &Source, s: &SearchRunConfig) -> Result<(), CliError> {
    s.validate()
        .map_err(|e| src.core_invalid(Some("search"), e))
}

/// `sbs search`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchFile {
    pub data: DataSection,
    pub model: ModelConfig,
    pub search: SearchRunConfig,
}

impl SearchFile {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        self.data.validate(src)?;
        validate_model(src, &self.model)?;
        validate_search(src, &self.search)
    }

    /// The freshly initialized network for `inputs` features.
    pub fn init_model(&self, train: &Dataset) -> anyhow::Result<sbs_core::Mlp> {
        Ok(sbs_core::Mlp::seeded(
            train.dim(),
            train.classes,
            &self.model,
            self.search.weight_normalization,
            self.search.seed,
        )?)
    }
}

/// `sbs sweep`: a search file plus the lambdas to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepFile {
    pub lambdas: Vec<f64>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub search: SearchRunConfig,
}

impl Default for SweepFile {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.01, 0.1, 1.0],
            data: DataSection::default(),
            model: ModelConfig::default(),
            search: SearchRunConfig::default(),
        }
    }
}

impl SweepFile {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        if self.lambdas.is_empty() {
            return Err(src.invalid(None, "lambdas", "need at least one value"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(src.invalid(None, "lambdas", format!("must be >= 0, got {l}")));
        }
        self.at(self.lambdas[0]).validate(src)
    }

    pub fn at(&self, lambda: f64) -> SearchFile {
        SearchFile {
            data: self.data.clone(),
            model: self.model.clone(),
            search: SearchRunConfig {
                lambda,
                ..self.search.clone()
            },
        }
    }
}

/// `sbs finetune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneFile {
    /// Checkpoint manifest written by `sbs search`.
    pub checkpoint: PathBuf,
    /// Configuration to train at; the checkpoint's own when unset.
    #[serde(default)]
    pub compression_config: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    /// Fine-tune settings; ladder and group size come from the checkpoint.
    #[serde(default)]
    pub search: SearchRunConfig,
}

impl FinetuneFile {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        self.data.validate(src)?;
        validate_search(src, &self.search)
    }
}

/// `sbs report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub compression_config: PathBuf,
    /// JSON list of layer specs.
    #[serde(default)]
    pub layers: Option<PathBuf>,
    /// Take the layer specs and group size from a checkpoint.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Built-in layer specs: `resnet18`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_true")]
    pub couple_in_channels: bool,
}

fn default_group_size() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl ReportFile {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        let sources = [
            self.layers.is_some(),
            self.checkpoint.is_some(),
            self.preset.is_some(),
        ];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return Err(src.invalid(
                None,
                "layers",
                "set exactly one of `layers`, `checkpoint`, `preset`",
            ));
        }
        if let Some(p) = &self.preset {
            if p != "resnet18" {
                return Err(src.invalid(None, "preset", format!("unknown preset `{p}`")));
            }
        }
        if self.group_size == 0 {
            return Err(src.invalid(None, "group_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `sbs prop1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1File {
    pub seeds: Vec<u64>,
    pub prop1: Prop1Config,
}

impl Default for Prop1File {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            prop1: Prop1Config::default(),
        }
    }
}

impl Prop1File {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        let t = Some("prop1");
        if self.seeds.is_empty() {
            return Err(src.invalid(None, "seeds", "need at least one seed"));
        }
        let p = &self.prop1;
        if p.steps == 0 {
            return Err(src.invalid(t, "steps", "must be at least 1"));
        }
        if p.batch_size == 0 {
            return Err(src.invalid(t, "batch_size", "must be at least 1"));
        }
        for (key, v) in [("lr", p.lr), ("lr_gate", p.lr_gate), ("v_w", p.v_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(src.invalid(t, key, format!("must be a positive number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&p.momentum) {
            return Err(src.invalid(
                t,
                "momentum",
                format!("must lie in [0, 1), got {}", p.momentum),
            ));
        }
        let task = &p.task;
        let tt = Some("prop1.task");
        if task.samples == 0 {
            return Err(src.invalid(tt, "samples", "must be at least 1"));
        }
        if task.dim == 0 {
            return Err(src.invalid(tt, "dim", "must be at least 1"));
        }
        if task.noise_std.is_nan() || task.noise_std < 0.0 {
            return Err(src.invalid(tt, "noise_std", "must be >= 0"));
        }
        if task.x_std.is_nan() || task.x_std <= 0.0 {
            return Err(src.invalid(tt, "x_std", "must be positive"));
        }
        Ok(())
    }
}

/// `sbs oracle`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleFile {
    pub seed: u64,
    pub oracle: OracleFixture,
}

impl OracleFile {
    pub fn validate(&self, src: &Source) -> Result<(), CliError> {
        let o = &self.oracle;
        let t = Some("oracle");
        if !(o.train_fraction > 0.0 && o.train_fraction < 1.0) {
            return Err(src.invalid(
                t,
                "train_fraction",
                format!("must lie in (0, 1), got {}", o.train_fraction),
            ));
        }
        if o.hidden == 0 {
            return Err(src.invalid(t, "hidden", "must be at least 1"));
        }
        if o.score_steps == 0 {
            return Err(src.invalid(t, "score_steps", "must be at least 1"));
        }
        let d = &o.data;
        let dt = Some("oracle.data");
        if d.samples < 2 || d.classes < 2 || d.dim == 0 {
            return Err(src.invalid(
                dt,
                "samples",
                "need at least 2 samples, 2 classes and 1 dimension",
            ));
        }
        if !(d.spread > 0.0 && d.spread.is_finite()) {
            return Err(src.invalid(dt, "spread", "must be a positive number"));
        }
        o.run
            .validate()
            .map_err(|e| src.core_invalid(Some("oracle.run"), e))
    }
}
