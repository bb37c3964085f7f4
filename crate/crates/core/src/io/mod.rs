//! Checkpoint container, corpus loading and report files.

mod checkpoint;
mod corpus;
mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, Manifest, TensorEntry, FORMAT_VERSION};
pub use corpus::{bundled_corpus, encode_bytes, load_corpus, BUNDLED_CORPUS};
pub use report::{
    cohort_report, eval_report, format_float, length_report, pattern_report, read_report, read_score_table,
    score_report, sweep_report, write_report, Cell, Format, Report,
};

/// Writes `bytes` next to `path` and renames into place, so readers never see
/// a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
