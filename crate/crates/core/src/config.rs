//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::{CaptionSource, PromptTemplate};
use crate::attention_metrics::Metric;
use crate::error::{Error, Result};
use crate::interchange::EmbeddingFiles;
use crate::retrieval::RetrievalMethod;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    /// Image embeddings used by SIIR and CLIPScore.
    pub embeddings: Option<EmbeddingFiles>,
    /// Embeddings of generated captions keyed by sample id, for CLIPScore.
    pub caption_embeddings: Option<EmbeddingFiles>,
    pub run: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Demonstration set written by `build` and read by `score`.
    pub demos: Option<PathBuf>,
    /// Generated captions, `[{sample_id, caption}]`.
    pub captions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricToggles {
    pub cider: bool,
    pub plain_cider: bool,
    pub clipscore: bool,
    pub chair: bool,
    pub shortcut: bool,
    pub attention: Vec<Metric>,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            cider: true,
            plain_cider: false,
            clipscore: true,
            chair: true,
            shortcut: true,
            attention: Metric::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub retrieval: RetrievalMethod,
    pub caption_source: CaptionSource,
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    /// Query image ids; every dataset image when absent.
    #[serde(default)]
    pub queries: Option<Vec<String>>,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub metrics: MetricToggles,
}

/// A loaded configuration together with the exact bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub raw: Vec<u8>,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, raw, base_dir })
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn require(&self, name: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Config(format!("paths.{name} is required for this command")))?;
        let full = self.resolve(p);
        if !full.exists() {
            return Err(Error::Config(format!("paths.{name}: {} does not exist", full.display())));
        }
        Ok(full)
    }

    pub fn embedding_paths(&self, files: &EmbeddingFiles) -> (PathBuf, PathBuf) {
        (self.resolve(Path::new(&files.tensor)), self.resolve(Path::new(&files.ids)))
    }

    /// Checks the invariants that do not depend on the command.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        c.template.validate()?;
        let p = &c.paths;
        for (name, path) in [
            ("dataset", &p.dataset),
            ("run", &p.run),
            ("lexicon", &p.lexicon),
            ("captions", &p.captions),
        ] {
            if path.is_some() {
                self.require(name, path)?;
            }
        }
        for (name, files) in [("embeddings", &p.embeddings), ("caption_embeddings", &p.caption_embeddings)] {
            if let Some(files) = files {
                let (t, i) = self.embedding_paths(files);
                for f in [t, i] {
                    if !f.exists() {
                        return Err(Error::Config(format!("paths.{name}: {} does not exist", f.display())));
                    }
                }
            }
        }
        Ok(())
    }
}
