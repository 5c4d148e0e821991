//! Run configuration read from a TOML file.
//!
//! ```toml
//! [paths]
//! train = "train.jsonl"
//! dev = "dev.jsonl"
//! checkpoint_dir = "runs/toy"
//!
//! [encoder]
//! hidden = 150
//!
//! [training]
//! learning_rate = 0.001
//! ```
//!
//! Every section and key is optional; missing keys take their defaults.
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use absa_seq::decoder::DecoderConfig;
use absa_seq::encoder::EncoderConfig;
use absa_seq::model::ModelConfig;
use absa_seq::training::{GradCheckSetup, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Whitespace-separated word vectors used to seed the word table.
    pub pretrained: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Dataset whose first sentence the gradient check differentiates.
    pub gradcheck: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training words seen fewer times than this map to the unknown word.
    pub min_word_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { min_word_freq: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub gradcheck: GradCheckSetup,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        config.paths.resolve(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Checks every numeric field; the error names the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate()?;
        self.training.validate()?;
        if self.data.min_word_freq == 0 {
            return Err(CliError::field("data.min_word_freq", "must be positive"));
        }
        let g = &self.gradcheck;
        if !(g.epsilon.is_finite() && g.epsilon > 0.0) {
            return Err(CliError::field("gradcheck.epsilon", "must be a positive number"));
        }
        if !(g.param_scale.is_finite() && g.param_scale > 0.0) {
            return Err(CliError::field("gradcheck.param_scale", "must be a positive number"));
        }
        Ok(())
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.dev,
            &mut self.test,
            &mut self.pretrained,
            &mut self.checkpoint_dir,
            &mut self.gradcheck,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Returns `path` if it names an existing file, otherwise a validation error
/// naming `field`.
pub fn existing_file(field: &str, path: Option<&Path>) -> Result<PathBuf, CliError> {
    let path = path.ok_or_else(|| CliError::field(field, "is required"))?;
    if !path.is_file() {
        return Err(CliError::field(field, format!("file not found: {}", path.display())));
    }
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.encoder, EncoderConfig::default());
        assert_eq!(c.training.learning_rate, 1e-3);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "[encoder]\nhidden = 4\n[training]\nbatch_size = 2\nseed = 9\n[data]\nmin_word_freq = 2\n",
        )
        .unwrap();
        assert_eq!(c.encoder.hidden, 4);
        assert_eq!(c.encoder.word_dim, EncoderConfig::default().word_dim);
        assert_eq!((c.training.batch_size, c.training.seed), (2, 9));
        assert_eq!(c.data.min_word_freq, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[training]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
        assert!(RunConfig::parse("[optimizer]\n").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let cases = [
            ("[training]\ndropout = 1.5\n", "training.dropout"),
            ("[encoder]\nhidden = 0\n", "encoder.hidden"),
            ("[decoder]\nattention_dim = 0\n", "decoder.attention_dim"),
            ("[data]\nmin_word_freq = 0\n", "data.min_word_freq"),
            ("[gradcheck]\nepsilon = -1.0\n", "gradcheck.epsilon"),
        ];
        for (text, field) in cases {
            let err = RunConfig::parse(text).unwrap().validate().unwrap_err();
            assert!(err.to_string().contains(field), "{text}: {err}");
            assert_eq!(err.exit_code(), 1);
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = RunConfig::parse("[paths]\ntrain = \"a.jsonl\"\ndev = \"/abs/b.jsonl\"\n").unwrap();
        c.paths.resolve(Path::new("/cfg"));
        assert_eq!(c.paths.train.as_deref(), Some(Path::new("/cfg/a.jsonl")));
        assert_eq!(c.paths.dev.as_deref(), Some(Path::new("/abs/b.jsonl")));
    }

    #[test]
    fn missing_files_name_the_field() {
        let err = existing_file("paths.train", Some(Path::new("/no/such/file"))).unwrap_err();
        assert!(err.to_string().contains("paths.train"));
        assert!(existing_file("paths.dev", None).unwrap_err().to_string().contains("paths.dev"));
    }
}
