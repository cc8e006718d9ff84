//! Seeded synthetic multi-channel images whose channels are all affine views
//! of one shared smooth latent field, plus optional per-channel texture.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::{save_gray16, write_manifest, ManifestEntry};
use crate::dataset::{MarkerRegistry, MultiChannelImage, Plane, RawSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelTransform {
    pub gain: f64,
    pub offset: f64,
    /// Box-blur radius applied to the latent before the affine map.
    pub blur_radius: usize,
    pub texture_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub channels: Vec<ChannelTransform>,
    /// Sinusoids summed into the latent field.
    pub n_waves: usize,
    /// Radius of the repeated box blur that smooths the latent's noise component.
    pub noise_radius: usize,
    /// Weight of the smoothed noise relative to the sinusoids.
    pub noise_weight: f64,
}

impl PhantomSpec {
    /// Alternating positive and negative gains, blur radii 0..2, low texture.
    pub fn standard(n_channels: usize, size: usize, n_samples: usize, seed: u64) -> Self {
        let channels = (0..n_channels)
            .map(|i| {
                let positive = i % 2 == 0;
                ChannelTransform {
                    gain: if positive { 0.8 } else { -0.7 },
                    offset: if positive { 0.1 } else { 0.85 },
                    blur_radius: i % 3,
                    texture_amplitude: 0.03,
                }
            })
            .collect();
        PhantomSpec {
            height: size,
            width: size,
            n_samples,
            seed,
            channels,
            n_waves: 5,
            noise_radius: 3,
            noise_weight: 0.6,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn with_texture(mut self, amplitude: f64) -> Self {
        for c in &mut self.channels {
            c.texture_amplitude = amplitude;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.n_samples == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("phantom needs channels, samples and a non-empty size"));
        }
        if self.channels.iter().any(|c| c.gain == 0.0 || !c.gain.is_finite()) {
            return Err(Error::invalid("phantom gains must be nonzero"));
        }
        Ok(())
    }

    pub fn sample_id(i: usize) -> String {
        format!("phantom_{i:03}")
    }
}

/// Separable box blur with clamped borders.
pub fn box_blur(plane: &Plane, radius: usize) -> Plane {
    if radius == 0 {
        return plane.clone();
    }
    let (h, w) = plane.dims();
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = plane.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| src[y * w + clamp(x as isize + d, w)]).sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r).map(|d| tmp[clamp(y as isize + d, h) * w + x]).sum();
            out[y * w + x] = s / norm;
        }
    }
    Plane::new(h, w, out).expect("dims unchanged")
}

fn rescale_unit(plane: &mut Plane) {
    let (lo, hi) = plane
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in plane.data_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Smooth latent in [0, 1]: seeded sinusoids plus blurred white noise.
pub fn latent_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Plane {
    let (h, w) = (spec.height, spec.width);
    let mut latent = Plane::zeros(h, w);
    let scale = h.max(w) as f64;
    for _ in 0..spec.n_waves {
        let cycles = rng.random_range(0.5..3.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.5..1.0);
        let (kx, ky) = (angle.cos(), angle.sin());
        let freq = std::f64::consts::TAU * cycles / scale;
        for y in 0..h {
            for x in 0..w {
                let t = freq * (kx * x as f64 + ky * y as f64) + phase;
                let v = latent.get(y, x) + amp * t.sin();
                latent.set(y, x, v);
            }
        }
    }
    let noise = Plane::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sized from dims");
    let mut smooth = box_blur(&box_blur(&noise, spec.noise_radius), spec.noise_radius);
    rescale_unit(&mut smooth);
    for (l, n) in latent.data_mut().iter_mut().zip(smooth.data()) {
        *l += spec.noise_weight * spec.n_waves.max(1) as f64 * (n - 0.5);
    }
    rescale_unit(&mut latent);
    latent
}

fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane {
    let raw = Plane::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sized from dims");
    box_blur(&raw, 1)
}

/// One sample; independent of every other sample index.
pub fn generate_sample(spec: &PhantomSpec, index: usize, registry: Arc<MarkerRegistry>) -> Result<RawSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add((index as u64).wrapping_mul(0x2545_F491_4F6C_DD1D)));
    let latent = latent_field(spec, &mut rng);
    let planes = spec
        .channels
        .iter()
        .map(|c| {
            let tex = texture(spec.height, spec.width, &mut rng);
            let blurred = box_blur(&latent, c.blur_radius);
            let data = blurred
                .data()
                .iter()
                .zip(tex.data())
                .map(|(&l, &t)| (c.gain * l + c.offset + c.texture_amplitude * t).clamp(0.0, 1.0))
                .collect();
            Plane::new(spec.height, spec.width, data).expect("sized from dims")
        })
        .collect();
    Ok(RawSample {
        sample_id: PhantomSpec::sample_id(index),
        image: MultiChannelImage::new(registry, planes, false)?,
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<RawSample>> {
    spec.validate()?;
    let registry = Arc::new(MarkerRegistry::numbered(spec.n_channels()));
    (0..spec.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(spec, i, registry.clone()))
        .collect()
}

/// Write `<dir>/<sample>/<marker>.png` (16-bit) and `<dir>/manifest.jsonl`.
pub fn write_phantom(spec: &PhantomSpec, dir: &Path) -> Result<PathBuf> {
    let samples = generate_phantom(spec)?;
    let mut entries = Vec::new();
    for s in &samples {
        let sub = dir.join(&s.sample_id);
        fs::create_dir_all(&sub)?;
        for (c, plane) in s.image.planes().iter().enumerate() {
            let marker = s.image.registry().name(c).to_string();
            let rel = PathBuf::from(&s.sample_id).join(format!("{marker}.png"));
            save_gray16(&dir.join(&rel), plane)?;
            entries.push(ManifestEntry {
                sample_id: s.sample_id.clone(),
                marker,
                path: rel,
            });
        }
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn deterministic_and_bounded() {
        let spec = PhantomSpec::standard(4, 32, 3, 9);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.planes(), y.image.planes());
        }
        assert!(a
            .iter()
            .flat_map(|s| s.image.planes())
            .flat_map(|p| p.data())
            .all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a[0].image.planes(), a[1].image.planes());
    }

    #[test]
    fn degenerate_spec_gives_identical_channels() {
        let mut spec = PhantomSpec::standard(3, 24, 1, 1);
        for c in &mut spec.channels {
            *c = ChannelTransform {
                gain: 1.0,
                offset: 0.0,
                blur_radius: 1,
                texture_amplitude: 0.0,
            };
        }
        let s = &generate_phantom(&spec).unwrap()[0];
        let p = s.image.planes();
        assert_eq!(p[0], p[1]);
        assert_eq!(p[1], p[2]);
    }

    #[test]
    fn channels_strongly_correlated_without_texture() {
        let spec = PhantomSpec::standard(4, 64, 2, 3).with_texture(0.0);
        for s in generate_phantom(&spec).unwrap() {
            let p = s.image.planes();
            for i in 0..4 {
                for j in 0..i {
                    let r = corr(p[i].data(), p[j].data()).abs();
                    assert!(r > 0.9, "channels {i},{j}: {r}");
                }
            }
        }
    }

    #[test]
    fn zero_gain_rejected() {
        let mut spec = PhantomSpec::standard(2, 16, 1, 0);
        spec.channels[1].gain = 0.0;
        assert!(generate_phantom(&spec).is_err());
    }
}
