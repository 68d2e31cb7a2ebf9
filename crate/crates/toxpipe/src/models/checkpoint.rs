//! Checkpoint files: little-endian binary with a canonical JSON metadata
//! header and named parameter blobs.
//!
//! Layout: magic `TXPC`, u32 version, u64 metadata length, metadata JSON,
//! u64 blob count, then per blob {u64 name length, name, u8 dtype, u64
//! rank, u64 dims, f64 values}. Every parameter contributes three blobs:
//! its values plus the two Adam moment buffers under reserved `.m.` and
//! `.v.` name prefixes. Save -> load -> save is byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::tensor::ParamRegistry;
use crate::util::canonical_json;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TXPC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Where the parameters came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub epochs: usize,
    pub seed: u64,
}

/// A loaded checkpoint: architecture, parameters (with Adam state),
/// vocabulary digest and training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub registry: ParamRegistry,
    pub vocab_digest: String,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    adam_step: u64,
    config: ModelConfig,
    frozen_groups: Vec<String>,
    params: Vec<ParamMeta>,
    provenance: Provenance,
    vocab_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    group: String,
    name: String,
}

pub fn save_checkpoint(
    path: &Path,
    registry: &ParamRegistry,
    config: &ModelConfig,
    vocab_digest: &str,
    provenance: &Provenance,
) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let meta = Meta {
        adam_step: registry.step_count(),
        config: config.clone(),
        frozen_groups: registry.frozen_groups().iter().cloned().collect(),
        params: (0..registry.len())
            .map(|i| ParamMeta {
                group: registry.group(i).to_string(),
                name: registry.name(i).to_string(),
            })
            .collect(),
        provenance: provenance.clone(),
        vocab_digest: vocab_digest.to_string(),
    };
    let meta_json = canonical_json(&meta).map_err(|e| ModelError::CheckpointCorrupt {
        path: path.display().to_string(),
        reason: format!("metadata serialization failed: {e}"),
    })?;

    let file = fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(io_err)?;
    out.write_all(&(meta_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    out.write_all(meta_json.as_bytes()).map_err(io_err)?;

    let blob_count = registry.len() as u64 * 3;
    out.write_all(&blob_count.to_le_bytes()).map_err(io_err)?;
    for i in 0..registry.len() {
        let name = registry.name(i);
        let shape = registry.shape(i);
        let (m, v) = registry.moments(i);
        write_blob(&mut out, name, shape, registry.values(i)).map_err(io_err)?;
        write_blob(&mut out, &format!(".m.{name}"), shape, m).map_err(io_err)?;
        write_blob(&mut out, &format!(".v.{name}"), shape, v).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn write_blob<W: Write>(
    out: &mut W,
    name: &str,
    shape: &[usize],
    values: &[f64],
) -> std::io::Result<()> {
    out.write_all(&(name.len() as u64).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[DTYPE_F64])?;
    out.write_all(&(shape.len() as u64).to_le_bytes())?;
    for &dim in shape {
        out.write_all(&(dim as u64).to_le_bytes())?;
    }
    for &value in values {
        out.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let corrupt = |reason: String| ModelError::CheckpointCorrupt {
        path: path.display().to_string(),
        reason,
    };

    let file = fs::File::open(path).map_err(io_err)?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            path: path.display().to_string(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = read_u64(&mut input, path)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut input, &mut meta_bytes, path)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| corrupt(format!("metadata parse failed: {e}")))?;
    meta.config.validate()?;

    let blob_count = read_u64(&mut input, path)? as usize;
    if blob_count != meta.params.len() * 3 {
        return Err(corrupt(format!(
            "{} blobs for {} parameters",
            blob_count,
            meta.params.len()
        )));
    }

    let mut registry = ParamRegistry::new();
    for spec in &meta.params {
        let (name, shape, values) = read_blob(&mut input, path)?;
        if name != spec.name {
            return Err(corrupt(format!(
                "expected values blob {:?}, found {name:?}",
                spec.name
            )));
        }
        let index = registry.register(&spec.group, &spec.name, shape.clone(), values)?;

        let (m_name, m_shape, m_values) = read_blob(&mut input, path)?;
        let (v_name, v_shape, v_values) = read_blob(&mut input, path)?;
        if m_name != format!(".m.{}", spec.name) || v_name != format!(".v.{}", spec.name) {
            return Err(corrupt(format!(
                "moment blobs out of order near {:?}",
                spec.name
            )));
        }
        if m_shape != shape || v_shape != shape {
            return Err(corrupt(format!(
                "moment shape mismatch for {:?}",
                spec.name
            )));
        }
        registry.set_moments(index, m_values, v_values)?;
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(corrupt("trailing bytes after final blob".to_string()));
    }

    registry.set_step_count(meta.adam_step);
    registry.set_frozen_groups(BTreeSet::from_iter(meta.frozen_groups));
    Ok(Checkpoint {
        config: meta.config,
        registry,
        vocab_digest: meta.vocab_digest,
        provenance: meta.provenance,
    })
}

fn read_blob<R: Read>(
    input: &mut R,
    path: &Path,
) -> Result<(String, Vec<usize>, Vec<f64>), ModelError> {
    let corrupt = |reason: String| ModelError::CheckpointCorrupt {
        path: path.display().to_string(),
        reason,
    };
    let name_len = read_u64(input, path)? as usize;
    if name_len > 4096 {
        return Err(corrupt(format!("implausible name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(input, &mut name_bytes, path)?;
    let name =
        String::from_utf8(name_bytes).map_err(|_| corrupt("blob name is not UTF-8".to_string()))?;
    let mut dtype = [0u8; 1];
    read_exact(input, &mut dtype, path)?;
    if dtype[0] != DTYPE_F64 {
        return Err(corrupt(format!("unsupported dtype {}", dtype[0])));
    }
    let rank = read_u64(input, path)? as usize;
    if rank > 8 {
        return Err(corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(input, path)? as usize);
    }
    let len: usize = shape.iter().product();
    if len > (1 << 31) {
        return Err(corrupt(format!("implausible blob of {len} values")));
    }
    let mut values = Vec::with_capacity(len);
    let mut buffer = [0u8; 8];
    for _ in 0..len {
        read_exact(input, &mut buffer, path)?;
        values.push(f64::from_le_bytes(buffer));
    }
    Ok((name, shape, values))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], path: &Path) -> Result<(), ModelError> {
    input.read_exact(buf).map_err(|source| {
        if source.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::CheckpointCorrupt {
                path: path.display().to_string(),
                reason: "unexpected end of file".to_string(),
            }
        } else {
            ModelError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })
}

fn read_u32<R: Read>(input: &mut R, path: &Path) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R, path: &Path) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    read_exact(input, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}
