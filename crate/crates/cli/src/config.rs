//! Run configuration: one TOML file with data, model and generation sections.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use latent_dialog::corpus::{CorpusFormat, DEFAULT_MAX_UTTERANCE_LEN};
use latent_dialog::gan::GanConfig;
use latent_dialog::inference::GenerateConfig;
use latent_dialog::vae::VaeConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_VOCAB: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus paths; relative paths are resolved against the config file.
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub format: CorpusFormat,
    /// Vocabulary size including the four reserved entries.
    pub max_vocab: usize,
    pub min_freq: usize,
    /// Utterances are truncated to this many tokens.
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "train.txt".into(),
            valid: "valid.txt".into(),
            test: "test.txt".into(),
            format: CorpusFormat::default(),
            max_vocab: DEFAULT_MAX_VOCAB,
            min_freq: 1,
            max_len: DEFAULT_MAX_UTTERANCE_LEN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub gan: GanConfig,
    pub generate: GenerateConfig,
}

impl RunConfig {
    /// Reads a config file, resolving data paths relative to its directory.
    /// With no path, every default applies and data paths are relative to
    /// the working directory.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.valid, &mut cfg.data.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Every problem found, so they can all be reported at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.data.max_vocab <= 4 {
            out.push("data.max_vocab must exceed the 4 reserved entries".to_string());
        }
        if self.data.max_len == 0 {
            out.push("data.max_len must be at least 1".to_string());
        }
        out.extend(self.vae.validate());
        out.extend(self.gan.validate());
        out.extend(self.generate.validate());
        if self.gan.latent != self.vae.latent {
            out.push(format!(
                "gan.latent ({}) must equal vae.latent ({})",
                self.gan.latent, self.vae.latent
            ));
        }
        out
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("invalid configuration:\n{}", list.join("\n"))
    }

    /// The effective configuration, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }
}
