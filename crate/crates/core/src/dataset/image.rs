use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Ordered marker names. Position in the list is the channel index used
/// everywhere else, and the order is the staining order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerRegistry {
    names: Vec<String>,
}

impl MarkerRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Empty("marker registry"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate marker name {n:?}")));
            }
        }
        Ok(MarkerRegistry { names })
    }

    /// The eleven structural markers in staining order.
    pub fn mxif_structural() -> Self {
        MarkerRegistry::new([
            "DAPI",
            "Muc2",
            "Collagen",
            "beta-catenin",
            "pEGFR",
            "HLA-A",
            "PanCK",
            "Na-KATPase",
            "Vimentin",
            "SMA",
            "gamma-Actin",
        ])
        .expect("static names are unique")
    }

    /// Generic names `ch0..ch{n-1}`.
    pub fn numbered(n: usize) -> Self {
        MarkerRegistry::new((0..n).map(|i| format!("ch{i}"))).expect("numbered names are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Plane::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// Copy of the `size`x`size` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Plane {
        let mut data = Vec::with_capacity(size * size);
        for r in row..row + size {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + size]);
        }
        Plane {
            height: size,
            width: size,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// N co-registered planes in staining order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    registry: Arc<MarkerRegistry>,
    planes: Vec<Plane>,
    normalized: bool,
}

impl MultiChannelImage {
    pub fn new(registry: Arc<MarkerRegistry>, planes: Vec<Plane>, normalized: bool) -> Result<Self> {
        if planes.len() != registry.len() {
            return Err(Error::shape(format!(
                "{} planes for a registry of {} markers",
                planes.len(),
                registry.len()
            )));
        }
        let dims = planes[0].dims();
        if let Some(p) = planes.iter().find(|p| p.dims() != dims) {
            return Err(Error::shape(format!(
                "plane {:?} differs from {:?}",
                p.dims(),
                dims
            )));
        }
        if normalized {
            if let Some(v) = planes
                .iter()
                .flat_map(|p| p.data.iter())
                .find(|v| !(0.0..=1.0).contains(*v))
            {
                return Err(Error::invalid(format!(
                    "normalized image holds intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(MultiChannelImage {
            registry,
            planes,
            normalized,
        })
    }

    /// Interpret the single batch item of a `[1, N, H, W]` tensor as an image.
    pub fn from_tensor(registry: Arc<MarkerRegistry>, t: &Tensor, normalized: bool) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if b != 1 {
            return Err(Error::shape(format!("expected batch of one, got {b}")));
        }
        let planes = (0..c)
            .map(|ch| Plane::new(h, w, t.plane(0, ch).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        MultiChannelImage::new(registry, planes, normalized)
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dims();
        let data = self.planes.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::from_vec([1, self.planes.len(), h, w], data).expect("planes share dims")
    }

    pub fn registry(&self) -> &Arc<MarkerRegistry> {
        &self.registry
    }

    pub fn planes(&self) -> &[Plane] {
        &self.planes
    }

    pub fn plane(&self, channel: usize) -> &Plane {
        &self.planes[channel]
    }

    pub fn into_planes(self) -> Vec<Plane> {
        self.planes
    }

    pub fn n_channels(&self) -> usize {
        self.planes.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Binary raster with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl TissueMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask bits must be 0 or 1"));
        }
        Ok(TissueMask {
            height,
            width,
            bits,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        TissueMask {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    /// Pixels strictly above `threshold` count as covered.
    pub fn from_plane(plane: &Plane, threshold: f64) -> Self {
        TissueMask {
            height: plane.height,
            width: plane.width,
            bits: plane.data.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One spatial tile cut identically from every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub id: String,
    pub origin: (usize, usize),
    pub tiles: Vec<Plane>,
    pub sample_id: String,
    pub split: Split,
}

impl PatchRecord {
    pub fn size(&self) -> usize {
        self.tiles.first().map_or(0, Plane::height)
    }

    pub fn n_channels(&self) -> usize {
        self.tiles.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        let p = self.size();
        let data = self.tiles.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::from_vec([1, self.tiles.len(), p, p], data).expect("tiles are square and equal")
    }

    pub fn to_image(&self, registry: Arc<MarkerRegistry>) -> Result<MultiChannelImage> {
        MultiChannelImage::new(registry, self.tiles.clone(), true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_duplicates() {
        assert!(MarkerRegistry::new(["a", "b", "a"]).is_err());
        assert_eq!(MarkerRegistry::mxif_structural().len(), 11);
        assert_eq!(MarkerRegistry::mxif_structural().name(0), "DAPI");
    }

    #[test]
    fn image_checks_invariants() {
        let reg = Arc::new(MarkerRegistry::numbered(2));
        let ok = MultiChannelImage::new(
            reg.clone(),
            vec![Plane::zeros(2, 3), Plane::filled(2, 3, 1.0)],
            true,
        );
        assert!(ok.is_ok());
        let bad_dims =
            MultiChannelImage::new(reg.clone(), vec![Plane::zeros(2, 3), Plane::zeros(3, 2)], false);
        assert!(matches!(bad_dims, Err(Error::Shape(_))));
        let bad_range =
            MultiChannelImage::new(reg.clone(), vec![Plane::zeros(2, 2), Plane::filled(2, 2, 1.5)], true);
        assert!(bad_range.is_err());
        let bad_count = MultiChannelImage::new(reg, vec![Plane::zeros(2, 2)], false);
        assert!(bad_count.is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let reg = Arc::new(MarkerRegistry::numbered(2));
        let img = MultiChannelImage::new(
            reg.clone(),
            vec![
                Plane::new(1, 2, vec![0.1, 0.2]).unwrap(),
                Plane::new(1, 2, vec![0.3, 0.4]).unwrap(),
            ],
            true,
        )
        .unwrap();
        let back = MultiChannelImage::from_tensor(reg, &img.to_tensor(), true).unwrap();
        assert_eq!(back, img);
    }
}
