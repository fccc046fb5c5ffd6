use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mclab::corpus::GeneratorConfig;
use mclab::evaluation::EvalConfig;
use mclab::model::ModelConfig;
use mclab::training::{FinetuneConfig, PretrainConfig};

use crate::error::CliError;

/// File name of the resolved configuration echoed into output directories.
pub const RESOLVED: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Generator seed.
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            seed: 7,
            generator: GeneratorConfig::default(),
        }
    }
}

/// Everything a run needs. Missing sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.message().to_string()))
    }

    /// Checks every section and their cross-constraints.
    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.generator.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        if let Some(ft) = &self.eval.fewshot_finetune {
            ft.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
