//! Multi-scale conditional patch discriminators with per-layer feature taps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Initializer, ParamStore, LEAKY_SLOPE, NORM_EPS};

const KERNEL: usize = 4;
const PAD: usize = 2;
const MAX_WIDTH: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Channels of each of X and Y; the discriminator sees `2 * n_channels`.
    pub n_channels: usize,
    pub n_scales: usize,
    /// Feature layers per scale (T); a prediction layer follows them.
    pub n_layers: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig::reference(11)
    }
}

impl DiscriminatorConfig {
    pub fn reference(n_channels: usize) -> Self {
        DiscriminatorConfig {
            n_channels,
            n_scales: 3,
            n_layers: 4,
            base_width: 64,
        }
    }

    pub fn desk(n_channels: usize) -> Self {
        DiscriminatorConfig {
            n_channels,
            n_scales: 3,
            n_layers: 4,
            base_width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 1 {
            return Err(Error::invalid("need at least one discriminator scale"));
        }
        if self.n_layers < 2 {
            return Err(Error::invalid("need at least two discriminator layers"));
        }
        if self.n_channels == 0 || self.base_width == 0 {
            return Err(Error::invalid("discriminator widths must be positive"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.n_channels
    }

    /// Output width of feature layer `i`.
    pub fn layer_width(&self, i: usize) -> usize {
        (self.base_width << i).min(MAX_WIDTH)
    }

    /// Stride of feature layer `i`: 2 except for the last feature layer.
    pub fn layer_stride(&self, i: usize) -> usize {
        if i + 1 < self.n_layers {
            2
        } else {
            1
        }
    }
}

/// One scale's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorState {
    pub params: ParamStore,
}

/// Prediction map plus the T intermediate activations of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput {
    pub prediction: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminators {
    pub config: DiscriminatorConfig,
    pub scales: Vec<DiscriminatorState>,
}

pub fn build_discriminators(config: &DiscriminatorConfig, seed: u64) -> Result<Discriminators> {
    config.validate()?;
    let scales = (0..config.n_scales)
        .map(|k| {
            let mut init = Initializer::new(seed.wrapping_add(0x9E37_79B9 * (k as u64 + 1)));
            let mut p = ParamStore::new();
            let mut in_ch = config.input_channels();
            for i in 0..config.n_layers {
                let out = config.layer_width(i);
                init.conv(&mut p, &format!("layer{i}"), in_ch, out, KERNEL);
                in_ch = out;
            }
            init.conv(&mut p, "pred", in_ch, 1, KERNEL);
            DiscriminatorState { params: p }
        })
        .collect();
    Ok(Discriminators {
        config: config.clone(),
        scales,
    })
}

/// Graph handles for one scale: prediction and T feature taps.
pub struct ScaleVars {
    pub prediction: Var,
    pub features: Vec<Var>,
}

impl Discriminators {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph, trainable: bool) -> Vec<Bound<'a>> {
        self.scales.iter().map(|s| s.params.bind(g, trainable)).collect()
    }

    fn forward_scale(&self, g: &mut Graph, p: &Bound<'_>, input: Var) -> Result<ScaleVars> {
        let mut h = input;
        let mut features = Vec::with_capacity(self.config.n_layers);
        for i in 0..self.config.n_layers {
            h = nn::conv(g, p, &format!("layer{i}"), h, self.config.layer_stride(i), PAD)?;
            if i > 0 {
                h = g.instance_norm(h, NORM_EPS);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
            features.push(h);
        }
        let prediction = nn::conv(g, p, "pred", h, 1, PAD)?;
        Ok(ScaleVars {
            prediction,
            features,
        })
    }

    /// Record `D_k(X, Y)` for every scale; scale `k` sees the channel-wise
    /// concatenation average-pooled `k` times.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &[Bound<'_>],
        x: Var,
        y: Var,
    ) -> Result<Vec<ScaleVars>> {
        let (xs, ys) = (g.value(x).shape(), g.value(y).shape());
        if xs != ys {
            return Err(Error::shape(format!("D(X, Y) with X {xs:?} and Y {ys:?}")));
        }
        if xs[1] != self.config.n_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} channels per input, got {}",
                self.config.n_channels, xs[1]
            )));
        }
        let mut input = g.concat(x, y)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (k, p) in bound.iter().enumerate() {
            if k > 0 {
                input = g.avg_pool2(input)?;
            }
            out.push(self.forward_scale(g, p, input)?);
        }
        Ok(out)
    }

    /// Evaluate every scale outside of training.
    pub fn forward_multiscale(&self, x: &Tensor, y: &Tensor) -> Result<Vec<ScaleOutput>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let vars = self.forward_graph(&mut g, &bound, xv, yv)?;
        Ok(vars
            .into_iter()
            .map(|s| ScaleOutput {
                prediction: g.value(s.prediction).clone(),
                features: s.features.iter().map(|&f| g.value(f).clone()).collect(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            n_channels: n,
            n_scales: 3,
            n_layers: 3,
            base_width: 4,
        }
    }

    #[test]
    fn builds_three_identical_architectures() {
        let d = build_discriminators(&DiscriminatorConfig::desk(4), 3).unwrap();
        assert_eq!(d.n_scales(), 3);
        // 4x4 kernels, widths 8, 16, 32, 64 then 1, input 8 channels
        let per_scale = (8 * 8 * 16 + 8)
            + (8 * 16 * 16 + 16)
            + (16 * 32 * 16 + 32)
            + (32 * 64 * 16 + 64)
            + (64 * 16 + 1);
        for s in &d.scales {
            assert_eq!(s.params.numel(), per_scale);
        }
        let again = build_discriminators(&DiscriminatorConfig::desk(4), 3).unwrap();
        assert_eq!(d, again);
        assert_ne!(d.scales[0].params, d.scales[1].params);
    }

    #[test]
    fn multiscale_shapes_follow_layer_arithmetic() {
        let cfg = tiny(2);
        let d = build_discriminators(&cfg, 0).unwrap();
        let x = Tensor::full([1, 2, 64, 64], 0.3);
        let y = Tensor::full([1, 2, 64, 64], 0.6);
        let out = d.forward_multiscale(&x, &y).unwrap();
        assert_eq!(out.len(), 3);
        for (k, s) in out.iter().enumerate() {
            let mut side = 64 >> k;
            assert_eq!(s.features.len(), 3);
            // stride 2 layers: floor((n + 4 - 4) / 2) + 1; stride 1: n + 1
            let strides = [2, 2, 1];
            let widths = [4, 8, 16];
            for (i, f) in s.features.iter().enumerate() {
                side = if strides[i] == 2 { side / 2 + 1 } else { side + 1 };
                assert_eq!(f.shape(), [1, widths[i], side, side]);
                assert_eq!(f.len(), widths[i] * side * side);
            }
            assert_eq!(s.prediction.shape(), [1, 1, side + 1, side + 1]);
        }
        let again = d.forward_multiscale(&x, &y).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let d = build_discriminators(&tiny(2), 0).unwrap();
        let x = Tensor::zeros([1, 2, 16, 16]);
        assert!(d.forward_multiscale(&x, &Tensor::zeros([1, 2, 16, 8])).is_err());
        assert!(d
            .forward_multiscale(&Tensor::zeros([1, 3, 16, 16]), &Tensor::zeros([1, 3, 16, 16]))
            .is_err());
    }
}
