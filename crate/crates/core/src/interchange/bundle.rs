use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{AttentionRecord, Variant};
use super::tensor::{read_tensor_file, write_tensor_file, DType};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::retrieval::EmbeddingTable;
use crate::segmentation::TokenSegmentation;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub shot_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    #[serde(default)]
    pub name: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub kv_bytes_per_element: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationSettings>,
    /// Free-form description of how captured layer indices map onto the host model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_indexing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub segmentation: String,
    pub attention: BTreeMap<Variant, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFiles {
    pub tensor: String,
    pub ids: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FileTable {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub embeddings: BTreeMap<String, EmbeddingFiles>,
    /// `[{sample_id, caption}]` file of generated captions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<String>,
}

/// `manifest.json` at the root of a run directory. Unknown fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelInfo,
    #[serde(default)]
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub files: FileTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub sample_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub segmentation: TokenSegmentation,
    pub records: BTreeMap<Variant, AttentionRecord>,
    pub generated_caption: Option<String>,
}

impl Sample {
    pub fn record(&self, variant: Variant) -> Option<&AttentionRecord> {
        self.records.get(&variant)
    }
}

/// A fully validated run directory. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct RunBundle {
    pub model: ModelInfo,
    pub samples: Vec<Sample>,
    pub embeddings: BTreeMap<String, EmbeddingTable>,
    pub warnings: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn require_file(root: &Path, rel: &str) -> Result<PathBuf> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(Error::data(format!("missing file {}", path.display())));
    }
    Ok(path)
}

/// Loads and cross-validates a run directory. `path` may name the manifest
/// itself or the directory holding it.
pub fn load_run(path: &Path) -> Result<RunBundle> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported manifest version {}",
            manifest_path.display(),
            manifest.version
        )));
    }
    let model = manifest.model;
    if model.n_layers == 0 || model.n_heads == 0 || model.head_dim == 0 || model.kv_bytes_per_element == 0 {
        return Err(Error::data(format!(
            "{}: model dimensions must all be positive",
            manifest_path.display()
        )));
    }

    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        if !seen.insert(entry.sample_id.clone()) {
            return Err(Error::data(format!("duplicate sample_id `{}`", entry.sample_id)));
        }
        if entry.attention.is_empty() {
            return Err(Error::Consistency {
                sample_id: entry.sample_id,
                message: "no attention variants listed".into(),
            });
        }
        let seg = TokenSegmentation::load(&require_file(&root, &entry.segmentation)?)?;
        let mut records = BTreeMap::new();
        for (&variant, rel) in &entry.attention {
            let tensor = read_tensor_file(&require_file(&root, rel)?)?;
            let rec = AttentionRecord::new(entry.sample_id.clone(), variant, tensor)?;
            if rec.seq_len() != seg.len() {
                return Err(Error::Consistency {
                    sample_id: entry.sample_id,
                    message: format!(
                        "{variant} attention has seq_len {} but segmentation has {} tokens",
                        rec.seq_len(),
                        seg.len()
                    ),
                });
            }
            if rec.n_layers() != model.n_layers || rec.n_heads() != model.n_heads {
                return Err(Error::Consistency {
                    sample_id: entry.sample_id,
                    message: format!(
                        "{variant} attention has {} layers x {} heads; manifest declares {} x {}",
                        rec.n_layers(),
                        rec.n_heads(),
                        model.n_layers,
                        model.n_heads
                    ),
                });
            }
            records.insert(variant, rec);
        }
        samples.push(Sample {
            sample_id: entry.sample_id,
            segmentation: seg,
            records,
            generated_caption: entry.generated_caption,
        });
    }

    let with_both = samples.iter().filter(|s| s.records.len() == 2).count();
    if with_both > 0 && with_both < samples.len() {
        warnings.push(format!(
            "{} of {} samples lack one attention variant",
            samples.len() - with_both,
            samples.len()
        ));
    }

    if let Some(rel) = &manifest.files.captions {
        let captions: Vec<GeneratedCaption> = read_json(&require_file(&root, rel)?)?;
        for c in captions {
            let sample = samples
                .iter_mut()
                .find(|s| s.sample_id == c.sample_id)
                .ok_or_else(|| Error::data(format!("caption file references unknown sample_id `{}`", c.sample_id)))?;
            sample.generated_caption = Some(c.caption);
        }
    }

    let mut embeddings = BTreeMap::new();
    for (name, files) in &manifest.files.embeddings {
        let table = EmbeddingTable::load(&require_file(&root, &files.tensor)?, &require_file(&root, &files.ids)?)?;
        if !table.is_normalized() {
            warnings.push(format!("embedding table `{name}` is not L2-normalized"));
        }
        embeddings.insert(name.clone(), table);
    }

    Ok(RunBundle {
        model,
        samples,
        embeddings,
        warnings,
    })
}

impl RunBundle {
    pub fn new(model: ModelInfo) -> Self {
        Self {
            model,
            samples: Vec::new(),
            embeddings: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn sample(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Writes the bundle as a run directory. File names derive from sample
    /// position, not from ids, so arbitrary ids are safe.
    pub fn save(&self, dir: &Path, attention_dtype: DType) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, sample) in self.samples.iter().enumerate() {
            let seg_name = format!("seg_{i:05}.json");
            write_atomic(&dir.join(&seg_name), sample.segmentation.to_json().as_bytes())?;
            let mut attention = BTreeMap::new();
            for (&variant, rec) in &sample.records {
                let name = format!("attn_{i:05}_{variant}.iclt");
                write_tensor_file(&rec.to_tensor().with_dtype(attention_dtype), &dir.join(&name))?;
                attention.insert(variant, name);
            }
            entries.push(SampleEntry {
                sample_id: sample.sample_id.clone(),
                segmentation: seg_name,
                attention,
                generated_caption: sample.generated_caption.clone(),
            });
        }
        let mut files = FileTable::default();
        for (name, table) in &self.embeddings {
            let tensor = format!("emb_{name}.iclt");
            let ids = format!("emb_{name}.ids.json");
            table.save(&dir.join(&tensor), &dir.join(&ids))?;
            files.embeddings.insert(name.clone(), EmbeddingFiles { tensor, ids });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            model: self.model.clone(),
            samples: entries,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}
