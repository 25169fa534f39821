//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! Every key has a default, unknown sections or keys are rejected, and `#`
//! starts a comment line. See the README for the full key list.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gcf_core::backbone::{BackboneConfig, Stage};
use gcf_core::data::DEFAULT_TEST_FRACTION;
use gcf_core::graph::{Aggregation, GraphVariant};
use gcf_core::model::{GraphConfig, ModelConfig};
use gcf_core::train::TrainConfig;
use gcf_core::Precision;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{location}unknown key `{key}`")]
    UnknownKey { location: String, key: String },
    #[error("{location}bad value for `{key}`: {msg}")]
    Value {
        location: String,
        key: String,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub test_fraction: f64,
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: train.seed,
            precision: train.precision,
            out_dir: PathBuf::from("runs/default"),
            manifest: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            backbone: BackboneConfig::default(),
            graph: GraphConfig::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str, location: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value {
        location: location.to_string(),
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn parse_stages(key: &str, value: &str, location: &str) -> Result<Vec<Stage>, ConfigError> {
    value
        .split(',')
        .map(|c| parse_value::<usize>(key, c.trim(), location).map(Stage::new))
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    msg: format!("unterminated section header `{line}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            config.apply(&full, value.trim(), &format!("line {line_no}: "))?;
        }
        Ok(config)
    }

    /// Sets one `section.key`; used for file entries and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.apply(key, value, "")
    }

    fn apply(&mut self, key: &str, value: &str, at: &str) -> Result<(), ConfigError> {
        match key {
            "run.seed" => self.seed = parse_value(key, value, at)?,
            "run.precision" => self.precision = parse_value(key, value, at)?,
            "run.out" => self.out_dir = PathBuf::from(value),
            "data.manifest" => {
                self.manifest = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "data.test_fraction" => self.test_fraction = parse_value(key, value, at)?,
            "backbone.input_size" => self.backbone.input_size = parse_value(key, value, at)?,
            "backbone.channels" => self.backbone.input_channels = parse_value(key, value, at)?,
            "backbone.stages" => self.backbone.stages = parse_stages(key, value, at)?,
            "backbone.global_dim" => self.backbone.global_dim = parse_value(key, value, at)?,
            "graph.enabled" => self.graph.enabled = parse_value(key, value, at)?,
            "graph.variant" => {
                self.graph.variant = parse_value::<GraphVariant>(key, value, at)?;
            }
            "graph.layers" => self.graph.layers = parse_value(key, value, at)?,
            "graph.hidden_dim" => self.graph.hidden_dim = parse_value(key, value, at)?,
            "graph.aggregation" => {
                self.graph.aggregation = parse_value::<Aggregation>(key, value, at)?;
            }
            "train.epochs" => self.epochs = parse_value(key, value, at)?,
            "train.batch_size" => self.batch_size = parse_value(key, value, at)?,
            "train.learning_rate" => self.learning_rate = parse_value(key, value, at)?,
            "train.momentum" => self.momentum = parse_value(key, value, at)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    location: at.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            graph: self.graph.clone(),
            num_classes,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
            precision: self.precision,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "data.test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.model_config(2)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Renders every key, so the output parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let stages: Vec<String> = self
            .backbone
            .stages
            .iter()
            .map(|st| st.out_channels.to_string())
            .collect();
        let manifest = self
            .manifest
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "manifest = {manifest}");
        let _ = writeln!(s, "test_fraction = {}", self.test_fraction);
        let _ = writeln!(s, "\n[backbone]");
        let _ = writeln!(s, "input_size = {}", self.backbone.input_size);
        let _ = writeln!(s, "channels = {}", self.backbone.input_channels);
        let _ = writeln!(s, "stages = {}", stages.join(","));
        let _ = writeln!(s, "global_dim = {}", self.backbone.global_dim);
        let _ = writeln!(s, "\n[graph]");
        let _ = writeln!(s, "enabled = {}", self.graph.enabled);
        let _ = writeln!(s, "variant = {}", self.graph.variant.as_str().to_lowercase());
        let _ = writeln!(s, "layers = {}", self.graph.layers);
        let _ = writeln!(s, "hidden_dim = {}", self.graph.hidden_dim);
        let _ = writeln!(s, "aggregation = {}", self.graph.aggregation);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_comments() {
        let c = RunConfig::parse(
            "# comment\n[run]\nseed = 7\n\n[graph]\nvariant = v3\n[backbone]\nstages = 8, 16\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.graph.variant, GraphVariant::V3);
        assert_eq!(c.backbone.stages.len(), 2);
        assert_eq!(c.backbone.stages[1].out_channels, 16);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = RunConfig::parse("[train]\nepochs = 3\nwarmup = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(RunConfig::parse("[model]\nepochs = 3\n").is_err());
    }

    #[test]
    fn bad_value_names_key() {
        let err = RunConfig::parse("[train]\nbatch_size = many\n").unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("graph.variant", "v2").unwrap();
        c.set("data.manifest", "data/m.csv").unwrap();
        c.set("train.learning_rate", "0.005").unwrap();
        c.set("graph.aggregation", "mean").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn validation_catches_bad_fraction() {
        let mut c = RunConfig::default();
        c.test_fraction = 1.0;
        assert!(c.validate().is_err());
    }
}
