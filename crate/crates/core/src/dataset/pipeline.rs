use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{MarkerRegistry, MultiChannelImage, PatchRecord, Plane, Split, TissueMask};
use crate::error::{Error, Result};

/// Pixel-wise intersection of per-round coverage rasters.
pub fn compute_tissue_mask(per_round_coverage: &[TissueMask]) -> Result<TissueMask> {
    let first = per_round_coverage
        .first()
        .ok_or(Error::Empty("coverage raster list"))?;
    let (h, w) = first.dims();
    let mut bits = first.bits().to_vec();
    for raster in &per_round_coverage[1..] {
        if raster.dims() != (h, w) {
            return Err(Error::shape(format!(
                "coverage raster {:?} differs from {:?}",
                raster.dims(),
                (h, w)
            )));
        }
        for (b, &r) in bits.iter_mut().zip(raster.bits()) {
            *b &= r;
        }
    }
    TissueMask::new(h, w, bits)
}

/// Linear intensity range shared by one marker across a sample group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRange {
    pub lo: f64,
    pub hi: f64,
}

impl GroupRange {
    /// `(v - lo) / (hi - lo)` clamped to `[0, 1]`; zero when the range is degenerate.
    pub fn apply(&self, v: f64) -> f64 {
        if self.hi > self.lo {
            ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn apply_plane(&self, plane: &Plane) -> Plane {
        let data = plane.data().iter().map(|&v| self.apply(v)).collect();
        Plane::new(plane.height(), plane.width(), data).expect("dims unchanged")
    }
}

/// Per-marker ranges estimated on the training group, reused for every other sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub markers: Vec<String>,
    pub ranges: Vec<GroupRange>,
}

/// Group-wise linear normalization of one marker. The range is the global
/// min/max over in-mask pixels of every plane in the group.
pub fn normalize_group(
    planes: &[Plane],
    masks: Option<&[TissueMask]>,
) -> Result<(Vec<Plane>, GroupRange)> {
    let range = group_range(planes, masks)?;
    Ok((planes.iter().map(|p| range.apply_plane(p)).collect(), range))
}

pub fn group_range(planes: &[Plane], masks: Option<&[TissueMask]>) -> Result<GroupRange> {
    if planes.is_empty() {
        return Err(Error::Empty("normalization group"));
    }
    if let Some(masks) = masks {
        if masks.len() != planes.len() {
            return Err(Error::shape(format!(
                "{} masks for {} planes",
                masks.len(),
                planes.len()
            )));
        }
        if let Some((p, m)) = planes.iter().zip(masks).find(|(p, m)| p.dims() != m.dims()) {
            return Err(Error::shape(format!(
                "mask {:?} does not cover plane {:?}",
                m.dims(),
                p.dims()
            )));
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, plane) in planes.iter().enumerate() {
        for (j, &v) in plane.data().iter().enumerate() {
            if masks.is_some_and(|m| m[i].bits()[j] == 0) {
                continue;
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        // no pixel inside any mask
        return Ok(GroupRange { lo: 0.0, hi: 0.0 });
    }
    Ok(GroupRange { lo, hi })
}

/// Non-resampled grid tiling with stride `patch_size` from `(0, 0)`. The mask is
/// applied to every channel first; tiles crossing the boundary are dropped.
pub fn extract_patches(
    image: &MultiChannelImage,
    mask: &TissueMask,
    patch_size: usize,
    sample_id: &str,
) -> Result<Vec<PatchRecord>> {
    if !image.is_normalized() {
        return Err(Error::invalid("patch extraction needs a normalized image"));
    }
    if patch_size < 8 {
        return Err(Error::invalid(format!("patch size {patch_size} is below 8")));
    }
    let (h, w) = image.dims();
    if mask.dims() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let masked: Vec<Plane> = image
        .planes()
        .iter()
        .map(|p| {
            let data = p
                .data()
                .iter()
                .zip(mask.bits())
                .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
                .collect();
            Plane::new(h, w, data).expect("dims unchanged")
        })
        .collect();

    let mut out = Vec::new();
    for row in (0..h).step_by(patch_size).filter(|r| r + patch_size <= h) {
        for col in (0..w).step_by(patch_size).filter(|c| c + patch_size <= w) {
            out.push(PatchRecord {
                id: format!("{sample_id}_r{row}_c{col}"),
                origin: (row, col),
                tiles: masked.iter().map(|p| p.crop(row, col, patch_size)).collect(),
                sample_id: sample_id.to_string(),
                split: Split::Train,
            });
        }
    }
    Ok(out)
}

/// Keep unless some channel has a non-zero fraction strictly below `threshold`.
pub fn filter_patch(patch: &PatchRecord, threshold: f64) -> bool {
    patch.tiles.iter().all(|t| {
        let nonzero = t.data().iter().filter(|&&v| v != 0.0).count();
        nonzero as f64 / t.data().len() as f64 >= threshold
    })
}

/// Number of training items out of `n` for a fraction, floored.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    // the epsilon absorbs representation error in e.g. 0.8 * 15
    ((train_fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Seeded shuffle then tag the first `floor(fraction * n)` as train and the rest
/// as validation. Input order is preserved in the output.
pub fn split_train_val(
    mut patches: Vec<PatchRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<PatchRecord>> {
    if patches.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(patches.len(), train_fraction);
    for (rank, &i) in order.iter().enumerate() {
        patches[i].split = if rank < n_train { Split::Train } else { Split::Val };
    }
    Ok(patches)
}

/// Raw (unnormalized) multi-channel image of one biopsy sample.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub sample_id: String,
    pub image: MultiChannelImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub patch_size: usize,
    pub filter_threshold: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Pixels strictly above this value count as stained for the coverage rasters.
    pub coverage_threshold: f64,
    /// Whole samples held out for testing. When absent, `n_test_samples` are drawn with `seed`.
    pub test_samples: Option<Vec<String>>,
    pub n_test_samples: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            patch_size: 1024,
            filter_threshold: 0.05,
            train_fraction: 0.8,
            seed: 0,
            coverage_threshold: 0.0,
            test_samples: None,
            n_test_samples: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub registry: Arc<MarkerRegistry>,
    pub stats: NormStats,
    pub patches: Vec<PatchRecord>,
    /// Patches removed by the non-zero filter.
    pub filtered_out: usize,
}

impl PreparedDataset {
    pub fn split(&self, split: Split) -> Vec<PatchRecord> {
        self.patches.iter().filter(|p| p.split == split).cloned().collect()
    }
}

/// Full preprocessing: masks, group normalization, tiling, filtering and splits.
/// When `stats` is given the ranges are reused instead of estimated.
pub fn prepare_dataset(
    samples: &[RawSample],
    cfg: &PrepareConfig,
    stats: Option<&NormStats>,
) -> Result<PreparedDataset> {
    let first = samples.first().ok_or(Error::Empty("sample list"))?;
    let registry = first.image.registry().clone();
    if let Some(s) = samples.iter().find(|s| s.image.registry() != &registry) {
        return Err(Error::invalid(format!(
            "sample {} uses a different marker registry",
            s.sample_id
        )));
    }
    let test_ids = select_test_samples(samples, cfg)?;

    let masks: Vec<TissueMask> = samples
        .par_iter()
        .map(|s| {
            let coverage: Vec<TissueMask> = s
                .image
                .planes()
                .iter()
                .map(|p| TissueMask::from_plane(p, cfg.coverage_threshold))
                .collect();
            compute_tissue_mask(&coverage)
        })
        .collect::<Result<_>>()?;

    let stats = match stats {
        Some(s) => {
            if s.markers != registry.names() {
                return Err(Error::invalid(
                    "normalization statistics were computed for a different marker order",
                ));
            }
            s.clone()
        }
        None => {
            let group: Vec<usize> = (0..samples.len())
                .filter(|&i| !test_ids.contains(&samples[i].sample_id))
                .collect();
            if group.is_empty() {
                return Err(Error::Empty("training sample group"));
            }
            let group_masks: Vec<TissueMask> = group.iter().map(|&i| masks[i].clone()).collect();
            let ranges = (0..registry.len())
                .map(|c| {
                    let planes: Vec<Plane> =
                        group.iter().map(|&i| samples[i].image.plane(c).clone()).collect();
                    group_range(&planes, Some(&group_masks))
                })
                .collect::<Result<_>>()?;
            NormStats {
                markers: registry.names().to_vec(),
                ranges,
            }
        }
    };

    let per_sample: Vec<Vec<PatchRecord>> = samples
        .par_iter()
        .zip(&masks)
        .map(|(s, mask)| {
            let planes = s
                .image
                .planes()
                .iter()
                .zip(&stats.ranges)
                .map(|(p, r)| r.apply_plane(p))
                .collect();
            let image = MultiChannelImage::new(registry.clone(), planes, true)?;
            extract_patches(&image, mask, cfg.patch_size, &s.sample_id)
        })
        .collect::<Result<_>>()?;

    let mut pool = Vec::new();
    let mut test = Vec::new();
    let mut filtered_out = 0;
    for patch in per_sample.into_iter().flatten() {
        if !filter_patch(&patch, cfg.filter_threshold) {
            filtered_out += 1;
            continue;
        }
        if test_ids.contains(&patch.sample_id) {
            test.push(PatchRecord {
                split: Split::Test,
                ..patch
            });
        } else {
            pool.push(patch);
        }
    }
    let mut patches = if pool.is_empty() {
        Vec::new()
    } else {
        split_train_val(pool, cfg.train_fraction, cfg.seed)?
    };
    patches.extend(test);
    Ok(PreparedDataset {
        registry,
        stats,
        patches,
        filtered_out,
    })
}

fn select_test_samples(samples: &[RawSample], cfg: &PrepareConfig) -> Result<HashSet<String>> {
    if let Some(ids) = &cfg.test_samples {
        let known: HashSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        if let Some(id) = ids.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::invalid(format!("unknown test sample {id:?}")));
        }
        return Ok(ids.iter().cloned().collect());
    }
    if cfg.n_test_samples >= samples.len() && !samples.is_empty() && cfg.n_test_samples > 0 {
        return Err(Error::invalid(format!(
            "cannot hold out {} of {} samples for testing",
            cfg.n_test_samples,
            samples.len()
        )));
    }
    let mut ids: Vec<&String> = samples.iter().map(|s| &s.sample_id).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57));
    Ok(ids.into_iter().take(cfg.n_test_samples).cloned().collect())
}
