//! Line-delimited manifest of `{sample_id, marker, path}` records and the
//! per-marker grayscale image loader.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::image::{MarkerRegistry, MultiChannelImage, Plane};
use super::pipeline::RawSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub marker: String,
    pub path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(trimmed)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for e in entries {
        writeln!(out, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

/// Marker order as first seen in the manifest.
pub fn registry_from_manifest(entries: &[ManifestEntry]) -> Result<MarkerRegistry> {
    let mut names: Vec<&str> = Vec::new();
    for e in entries {
        if !names.contains(&e.marker.as_str()) {
            names.push(&e.marker);
        }
    }
    MarkerRegistry::new(names)
}

/// Read an 8- or 16-bit grayscale file as raw intensities.
pub fn load_gray(path: &Path) -> Result<Plane> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => other.into_luma16().into_raw().into_iter().map(f64::from).collect(),
    };
    Plane::new(h, w, data)
}

/// Save a `[0, 1]` plane as a 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, plane: &Plane) -> Result<()> {
    let data: Vec<u16> = plane
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        plane.width() as u32,
        plane.height() as u32,
        data,
    )
    .ok_or_else(|| Error::shape("plane buffer does not match its dimensions"))?;
    buf.save(path)?;
    Ok(())
}

/// Load every sample listed in the manifest. Relative paths resolve against
/// `base`. All failures are collected and reported together.
pub fn load_samples(entries: &[ManifestEntry], base: &Path) -> Result<Vec<RawSample>> {
    if entries.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let registry = Arc::new(registry_from_manifest(entries)?);
    let mut by_sample: BTreeMap<&str, Vec<Option<&ManifestEntry>>> = BTreeMap::new();
    let mut failures = Vec::new();
    for e in entries {
        let slots = by_sample
            .entry(&e.sample_id)
            .or_insert_with(|| vec![None; registry.len()]);
        let idx = registry.index_of(&e.marker).expect("registry built from entries");
        if slots[idx].is_some() {
            failures.push(format!("{}/{}: listed twice", e.sample_id, e.marker));
        }
        slots[idx] = Some(e);
    }

    let mut samples = Vec::new();
    for (sample_id, slots) in by_sample {
        let mut planes = Vec::with_capacity(slots.len());
        for (idx, slot) in slots.iter().enumerate() {
            let Some(e) = slot else {
                failures.push(format!("{sample_id}/{}: missing from manifest", registry.name(idx)));
                continue;
            };
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base.join(&e.path)
            };
            match load_gray(&path) {
                Ok(p) => planes.push(p),
                Err(err) => failures.push(format!("{}: {err}", path.display())),
            }
        }
        if planes.len() != registry.len() {
            continue;
        }
        match MultiChannelImage::new(registry.clone(), planes, false) {
            Ok(image) => samples.push(RawSample {
                sample_id: sample_id.to_string(),
                image,
            }),
            Err(err) => failures.push(format!("{sample_id}: {err}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Inputs(failures));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let plane = Plane::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        save_gray16(&path, &plane).unwrap();
        let back = load_gray(&path).unwrap();
        let expected: Vec<f64> = [0.0, 65535.0, 32768.0, 16384.0].to_vec();
        assert_eq!(back.data(), expected.as_slice());
    }

    #[test]
    fn missing_files_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                sample_id: "a".into(),
                marker: "m0".into(),
                path: "nope0.png".into(),
            },
            ManifestEntry {
                sample_id: "a".into(),
                marker: "m1".into(),
                path: "nope1.png".into(),
            },
        ];
        match load_samples(&entries, dir.path()) {
            Err(Error::Inputs(list)) => assert_eq!(list.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_samples(&[], dir.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![ManifestEntry {
            sample_id: "s".into(),
            marker: "DAPI".into(),
            path: "DAPI/s.png".into(),
        }];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        assert_eq!(registry_from_manifest(&entries).unwrap().names(), &["DAPI".to_string()]);
    }
}
