//! Per-marker image ingestion, tissue masks, group-wise normalization, tiling,
//! the non-zero patch filter, and train/validation/test splits.

mod image;
pub mod manifest;
mod pipeline;
pub mod store;

pub use image::{MarkerRegistry, MultiChannelImage, PatchRecord, Plane, Split, TissueMask};
pub use pipeline::{
    compute_tissue_mask, extract_patches, filter_patch, group_range, normalize_group,
    prepare_dataset, split_train_val, train_count, GroupRange, NormStats, PrepareConfig,
    PreparedDataset, RawSample,
};
