use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{expected_shape, Checkpoint, ModelConfig, BLOCK_TENSORS};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

/// `(manifest, data)` paths for a checkpoint stem. A trailing `.json` or
/// `.bin` is ignored, so either file names the pair.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    let (json_path, bin_path) = checkpoint_paths(path);
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.named_tensors() {
        let offset = data.len() as u64;
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_length: data.len() as u64 - offset,
        });
    }
    let manifest =
        Manifest { format_version: FORMAT_VERSION, config: ckpt.config, tensors, provenance: ckpt.provenance.clone() };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&bin_path, &data)?;
    write_atomic(&json_path, &json)
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedManifest(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (json_path, bin_path) = checkpoint_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| malformed(format!("{}: {e}", json_path.display())))?;
    let data = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    from_parts(manifest, &data)
}

fn from_parts(manifest: Manifest, data: &[u8]) -> Result<Checkpoint> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(malformed(format!("format_version {} (expected {FORMAT_VERSION})", manifest.format_version)));
    }
    let cfg = manifest.config;
    cfg.validate()?;

    let mut cursor = 0u64;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(malformed(format!("{}: dtype {} (only f32)", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_length != 4 * numel as u64 {
            return Err(malformed(format!(
                "{}: byte_length {} does not match shape {:?}",
                e.name, e.byte_length, e.shape
            )));
        }
        if e.byte_offset != cursor {
            return Err(malformed(format!(
                "{}: byte_offset {} leaves a gap or overlap (expected {cursor})",
                e.name, e.byte_offset
            )));
        }
        cursor += e.byte_length;
        let want =
            expected_shape(&cfg, &e.name).ok_or_else(|| malformed(format!("unexpected tensor name {}", e.name)))?;
        if want != e.shape {
            return Err(malformed(format!("{}: shape {:?}, expected {want:?}", e.name, e.shape)));
        }
        if cursor > data.len() as u64 {
            return Err(malformed(format!(
                "{}: region ends at byte {cursor} beyond the {}-byte data file",
                e.name,
                data.len()
            )));
        }
        let bytes = &data[e.byte_offset as usize..cursor as usize];
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if by_name.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?).is_some() {
            return Err(malformed(format!("tensor {} listed twice", e.name)));
        }
    }
    if cursor != data.len() as u64 {
        return Err(malformed(format!("tensors cover {cursor} bytes but the data file has {}", data.len())));
    }

    let mut take = |name: String| {
        by_name.remove(&name).ok_or_else(|| Error::IncompleteCheckpoint(format!("missing tensor {name}")))
    };
    let mut ckpt = Checkpoint::zeros(cfg)?;
    ckpt.embedding = take("embedding".into())?;
    for (i, block) in ckpt.blocks.iter_mut().enumerate() {
        for suffix in BLOCK_TENSORS {
            *block.tensor_mut(suffix).unwrap() = take(format!("blocks.{i}.{suffix}"))?;
        }
    }
    ckpt.final_norm = take("final_norm".into())?;
    ckpt.lm_head = take("lm_head".into())?;
    ckpt.provenance = manifest.provenance;
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::random_checkpoint;
    use crate::pruning::{ablate_heads, drop_layers};

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            d_ff: 8,
            vocab_size: 16,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            max_seq_len: 16,
        };
        random_checkpoint(cfg, 9).unwrap()
    }

    fn bits(c: &Checkpoint) -> Vec<(String, Vec<u32>)> {
        c.named_tensors().into_iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for ck in [small(), ablate_heads(&small(), &[(1, 0)]).unwrap(), drop_layers(&small(), &[2]).unwrap()] {
            let p = dir.path().join("m");
            save_checkpoint(&ck, &p).unwrap();
            let back = load_checkpoint(&dir.path().join("m.json")).unwrap();
            assert_eq!(bits(&back), bits(&ck));
            assert_eq!(back.config, ck.config);
            assert_eq!(back.provenance, ck.provenance);
        }
    }

    #[test]
    fn dropped_layers_are_renumbered_and_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        save_checkpoint(&drop_layers(&small(), &[2]).unwrap(), &p).unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(p.with_extension("json")).unwrap()).unwrap();
        let names: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
        assert!(names.contains(&"blocks.2.wq") && !names.contains(&"blocks.3.wq"));
        assert!(m.provenance.last().unwrap().contains("drop_layers 2"));
    }

    #[test]
    fn bad_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        save_checkpoint(&small(), &p).unwrap();
        let json = p.with_extension("json");
        let original: Manifest = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        let write = |m: &Manifest| fs::write(&json, serde_json::to_string(m).unwrap()).unwrap();

        let mut m = original.clone();
        m.tensors[0].byte_length -= 4;
        write(&m);
        assert!(matches!(load_checkpoint(&p), Err(Error::MalformedManifest(_))));

        let mut m = original.clone();
        m.tensors.pop();
        write(&m);
        assert!(matches!(load_checkpoint(&p), Err(Error::MalformedManifest(_))));

        let mut m = original.clone();
        m.format_version = 2;
        write(&m);
        assert!(matches!(load_checkpoint(&p), Err(Error::MalformedManifest(_))));
    }

    #[test]
    fn missing_and_corrupt_tensors() {
        let ck = small();
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in ck.named_tensors() {
            if name == "lm_head" {
                continue;
            }
            let off = data.len() as u64;
            t.data().iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes()));
            tensors.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: off,
                byte_length: data.len() as u64 - off,
            });
        }
        let m = Manifest { format_version: 1, config: ck.config, tensors, provenance: vec![] };
        assert!(matches!(from_parts(m.clone(), &data), Err(Error::IncompleteCheckpoint(_))));

        let mut bad = data.clone();
        bad[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        let mut full = m;
        let off = bad.len() as u64;
        ck.lm_head.data().iter().for_each(|v| bad.extend_from_slice(&v.to_le_bytes()));
        full.tensors.push(TensorEntry {
            name: "lm_head".into(),
            dtype: "f32".into(),
            shape: ck.lm_head.shape().to_vec(),
            byte_offset: off,
            byte_length: bad.len() as u64 - off,
        });
        assert!(matches!(from_parts(full, &bad), Err(Error::CorruptWeights(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_checkpoint(Path::new("/nonexistent/model")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.json"));
    }
}
