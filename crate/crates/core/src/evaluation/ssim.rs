//! Windowed structural similarity on single-channel rasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square Gaussian window (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::invalid("SSIM window must be odd"));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(Error::invalid("SSIM parameters must be positive"));
        }
        Ok(())
    }
}

/// Separable 'valid' filtering of a row-major `h x w` raster.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM map over every fully contained window position.
pub fn ssim_map(
    a: &[f64],
    b: &[f64],
    height: usize,
    width: usize,
    params: &SsimParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::shape(format!(
            "SSIM inputs of {} and {} values for {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    if height < params.window || width < params.window {
        return Err(Error::shape(format!(
            "{height}x{width} raster is smaller than the {0}x{0} window",
            params.window
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("SSIM inputs must be finite"));
    }
    let taps = params.taps();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, height, width, &taps);
    let mu_b = filter_valid(b, height, width, &taps);
    let e_aa = filter_valid(&aa, height, width, &taps);
    let e_bb = filter_valid(&bb, height, width, &taps);
    let e_ab = filter_valid(&ab, height, width, &taps);
    let (c1, c2) = (params.c1(), params.c2());
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean of the local SSIM map.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, params: &SsimParams) -> Result<f64> {
    let map = ssim_map(a, b, height, width, params)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let t = SsimParams::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn constant_images_match_closed_form() {
        let p = SsimParams::default();
        let a = vec![0.2; 32 * 32];
        let b = vec![0.8; 32 * 32];
        let c1 = 1e-4;
        let closed = (2.0 * 0.2 * 0.8 + c1) / (0.2f64.powi(2) + 0.8f64.powi(2) + c1);
        let got = ssim(&a, &b, 32, 32, &p).unwrap();
        assert!((got - closed).abs() < 1e-9, "{got} vs {closed}");
        assert!((closed - 0.470_66).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = SsimParams::default();
        assert!(ssim(&[0.0; 100], &[0.0; 99], 10, 10, &p).is_err());
        assert!(ssim(&[0.0; 100], &[0.0; 100], 10, 10, &p).is_err());
    }

    proptest! {
        #[test]
        fn bounded_symmetric_and_reflexive(
            a in proptest::collection::vec(0.0f64..1.0, 16 * 16),
            b in proptest::collection::vec(0.0f64..1.0, 16 * 16),
        ) {
            let p = SsimParams::default();
            let ab = ssim(&a, &b, 16, 16, &p).unwrap();
            let ba = ssim(&b, &a, 16, 16, &p).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ssim(&a, &a, 16, 16, &p).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
