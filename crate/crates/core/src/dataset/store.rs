//! On-disk patch store: `store.json` metadata, `index.jsonl` rows, and one
//! little-endian `f32` blob per patch under `patches/`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::image::{MarkerRegistry, PatchRecord, Plane, Split};
use super::pipeline::{NormStats, PrepareConfig, PreparedDataset};
use crate::error::{Error, Result};

const PATCH_MAGIC: &[u8; 8] = b"PXPATCH1";
pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub markers: Vec<String>,
    pub patch_size: usize,
    pub stats: NormStats,
    pub prepare: PrepareConfig,
    pub filtered_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: String,
    pub origin: [usize; 2],
    pub sample_id: String,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug)]
pub struct PatchStore {
    pub meta: StoreMeta,
    pub registry: Arc<MarkerRegistry>,
    pub patches: Vec<PatchRecord>,
}

impl PatchStore {
    pub fn split(&self, split: Split) -> Vec<PatchRecord> {
        self.patches.iter().filter(|p| p.split == split).cloned().collect()
    }
}

pub fn write_store(
    dir: &Path,
    data: &PreparedDataset,
    prepare: &PrepareConfig,
    config_hash: &str,
) -> Result<Vec<IndexRow>> {
    fs::create_dir_all(dir.join("patches"))?;
    let meta = StoreMeta {
        format_version: STORE_FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        markers: data.registry.names().to_vec(),
        patch_size: prepare.patch_size,
        stats: data.stats.clone(),
        prepare: prepare.clone(),
        filtered_out: data.filtered_out,
    };
    let mut rows = Vec::with_capacity(data.patches.len());
    for p in &data.patches {
        let file = format!("patches/{}.bin", p.id);
        write_patch_blob(&dir.join(&file), p)?;
        rows.push(IndexRow {
            id: p.id.clone(),
            origin: [p.origin.0, p.origin.1],
            sample_id: p.sample_id.clone(),
            split: p.split,
            file,
        });
    }
    fs::write(dir.join("store.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut index = fs::File::create(dir.join("index.jsonl"))?;
    for row in &rows {
        writeln!(index, "{}", serde_json::to_string(row)?)?;
    }
    Ok(rows)
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let path = dir.join("index.jsonl");
    let file = fs::File::open(&path)?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(rows)
}

/// Load a store; when `expected_hash` is given it must match the producing config.
pub fn read_store(dir: &Path, expected_hash: Option<&str>) -> Result<PatchStore> {
    let meta_path = dir.join("store.json");
    let meta: StoreMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format_version != STORE_FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported store version {}", meta.format_version),
        ));
    }
    if let Some(expected) = expected_hash {
        if expected != meta.config_hash {
            return Err(Error::HashMismatch {
                expected: expected.to_string(),
                found: meta.config_hash,
            });
        }
    }
    let registry = Arc::new(MarkerRegistry::new(meta.markers.clone())?);
    let rows = read_index(dir)?;
    let mut patches = Vec::with_capacity(rows.len());
    for row in rows {
        let tiles = read_patch_blob(&dir.join(&row.file))?;
        if tiles.len() != registry.len() {
            return Err(Error::format(
                dir.join(&row.file),
                format!("{} channels, store has {}", tiles.len(), registry.len()),
            ));
        }
        patches.push(PatchRecord {
            id: row.id,
            origin: (row.origin[0], row.origin[1]),
            tiles,
            sample_id: row.sample_id,
            split: row.split,
        });
    }
    Ok(PatchStore {
        meta,
        registry,
        patches,
    })
}

pub fn write_patch_blob(path: &Path, patch: &PatchRecord) -> Result<()> {
    let size = patch.size();
    let mut buf = Vec::with_capacity(16 + patch.n_channels() * size * size * 4);
    buf.extend_from_slice(PATCH_MAGIC);
    buf.extend_from_slice(&(patch.n_channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(size as u32).to_le_bytes());
    for tile in &patch.tiles {
        for &v in tile.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_patch_blob(path: &Path) -> Result<Vec<Plane>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != PATCH_MAGIC {
        return Err(Error::format(path, "not a patch blob"));
    }
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let size = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != channels * size * size * 4 {
        return Err(Error::format(path, "truncated patch blob"));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    values
        .chunks(size * size)
        .map(|c| Plane::new(size, size, c.to_vec()))
        .collect()
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let patch = PatchRecord {
            id: "x".into(),
            origin: (8, 16),
            tiles: vec![
                Plane::new(8, 8, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap(),
                Plane::filled(8, 8, 0.1),
            ],
            sample_id: "s".into(),
            split: Split::Val,
        };
        let path = dir.path().join("x.bin");
        write_patch_blob(&path, &patch).unwrap();
        let tiles = read_patch_blob(&path).unwrap();
        assert_eq!(tiles[0], patch.tiles[0]);
        assert_eq!(tiles[1].get(3, 3), f64::from(0.1f32));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(read_patch_blob(&path), Err(Error::Format { .. })));
    }
}
