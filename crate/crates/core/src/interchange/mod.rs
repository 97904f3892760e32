//! On-disk interchange: `.iclt` tensors, attention records and run bundles.

mod bundle;
mod record;
mod tensor;

use std::io::Write;
use std::path::Path;

pub use bundle::{
    load_run, EmbeddingFiles, FileTable, GeneratedCaption, GenerationSettings, Manifest, ModelInfo,
    RunBundle, Sample, SampleEntry, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use record::{AttentionRecord, Variant, ROW_SUM_TOLERANCE};
pub use tensor::{
    read_tensor, read_tensor_file, write_tensor, write_tensor_file, DType, Tensor, HEADER_LEN, MAGIC, VERSION,
};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
