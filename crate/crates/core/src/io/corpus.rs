use std::path::Path;

use crate::error::{Error, Result};

/// Public-domain English prose shipped with the crate.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

/// Byte-level tokenization: every byte is one token id in `0..256`.
pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if std::str::from_utf8(&bytes).is_err() {
        return Err(Error::parse(path, "corpus is not valid UTF-8"));
    }
    Ok(encode_bytes(&bytes))
}

pub fn bundled_corpus() -> Vec<u32> {
    encode_bytes(BUNDLED_CORPUS.as_bytes())
}
