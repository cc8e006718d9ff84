//! Coarse-to-fine N-in/N-out generator.
//!
//! The global network runs on the 2x average-pooled input and ends in a coarse
//! head producing per-channel logits. The local enhancer runs at full
//! resolution, merges the global features after its own downsampling step, and
//! adds its logits to the upsampled coarse logits before the bounded output
//! activation. With the enhancer head zeroed the full output therefore equals the
//! upsampled coarse output exactly.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::dataset::MultiChannelImage;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Initializer, ParamStore, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_channels: usize,
    /// Feature width of the local enhancer; the global network starts at twice this.
    pub base_width: usize,
    pub n_downsample: usize,
    pub n_resblocks_global: usize,
    pub n_resblocks_local: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::reference(11)
    }
}

impl GeneratorConfig {
    /// Full-size defaults: width 64, four downsamplings, 9 + 3 residual blocks.
    pub fn reference(n_channels: usize) -> Self {
        GeneratorConfig {
            n_channels,
            base_width: 64,
            n_downsample: 4,
            n_resblocks_global: 9,
            n_resblocks_local: 3,
        }
    }

    /// Reduced preset for desk-scale runs on small tiles.
    pub fn desk(n_channels: usize) -> Self {
        GeneratorConfig {
            n_channels,
            base_width: 8,
            n_downsample: 2,
            n_resblocks_global: 2,
            n_resblocks_local: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 2 {
            return Err(Error::invalid("generator needs at least two channels"));
        }
        if self.base_width == 0
            || self.n_downsample == 0
            || self.n_resblocks_global == 0
            || self.n_resblocks_local == 0
        {
            return Err(Error::invalid("generator layer counts must be positive"));
        }
        Ok(())
    }

    /// Full-resolution spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.n_downsample + 1)
    }

    fn global_width(&self) -> usize {
        2 * self.base_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CoarseOnly,
    Full,
}

/// Which sub-network a graph forward evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Global network applied directly to an input already at half resolution.
    GlobalNative,
    /// Global network on the pooled input, output upsampled back.
    CoarseUpsampled,
    /// Global network plus local enhancer.
    Full,
}

impl From<Stage> for ForwardMode {
    fn from(s: Stage) -> Self {
        match s {
            Stage::CoarseOnly => ForwardMode::CoarseUpsampled,
            Stage::Full => ForwardMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    pub stage: Stage,
    pub params: ParamStore,
}

pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<GeneratorState> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut p = ParamStore::new();
    let n = config.n_channels;
    let gw = config.global_width();

    init.conv(&mut p, "global.in", n, gw, 7);
    for i in 0..config.n_downsample {
        init.conv(&mut p, &format!("global.down{i}"), gw << i, gw << (i + 1), 3);
    }
    let deep = gw << config.n_downsample;
    for j in 0..config.n_resblocks_global {
        init.conv(&mut p, &format!("global.res{j}.conv1"), deep, deep, 3);
        init.conv(&mut p, &format!("global.res{j}.conv2"), deep, deep, 3);
    }
    for i in 0..config.n_downsample {
        let from = gw << (config.n_downsample - i);
        init.conv_transpose(&mut p, &format!("global.up{i}"), from, from / 2, 3);
    }
    init.conv(&mut p, "global.head", gw, n, 7);

    let lw = config.base_width;
    init.conv(&mut p, "local.in", n, lw, 7);
    init.conv(&mut p, "local.down", lw, gw, 3);
    for j in 0..config.n_resblocks_local {
        init.conv(&mut p, &format!("local.res{j}.conv1"), gw, gw, 3);
        init.conv(&mut p, &format!("local.res{j}.conv2"), gw, gw, 3);
    }
    init.conv_transpose(&mut p, "local.up", gw, lw, 3);
    init.conv(&mut p, "local.head", lw, n, 7);

    Ok(GeneratorState {
        config: config.clone(),
        stage: Stage::CoarseOnly,
        params: p,
    })
}

fn norm_relu(g: &mut Graph, x: Var) -> Var {
    let x = g.instance_norm(x, NORM_EPS);
    g.relu(x)
}

fn res_block(g: &mut Graph, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let h = nn::reflect_conv(g, p, &format!("{name}.conv1"), x, 1)?;
    let h = norm_relu(g, h);
    let h = nn::reflect_conv(g, p, &format!("{name}.conv2"), h, 1)?;
    let h = g.instance_norm(h, NORM_EPS);
    g.add(x, h)
}

impl GeneratorState {
    pub fn n_channels(&self) -> usize {
        self.config.n_channels
    }

    fn global_trunk(&self, g: &mut Graph, p: &Bound<'_>, x: Var) -> Result<Var> {
        let mut h = nn::reflect_conv(g, p, "global.in", x, 3)?;
        h = norm_relu(g, h);
        for i in 0..self.config.n_downsample {
            h = nn::conv(g, p, &format!("global.down{i}"), h, 2, 1)?;
            h = norm_relu(g, h);
        }
        for j in 0..self.config.n_resblocks_global {
            h = res_block(g, p, &format!("global.res{j}"), h)?;
        }
        for i in 0..self.config.n_downsample {
            h = nn::conv_transpose(g, p, &format!("global.up{i}"), h, 2, 1, 1)?;
            h = norm_relu(g, h);
        }
        Ok(h)
    }

    fn local_logits(&self, g: &mut Graph, p: &Bound<'_>, x: Var, global: Var) -> Result<Var> {
        let mut h = nn::reflect_conv(g, p, "local.in", x, 3)?;
        h = norm_relu(g, h);
        h = nn::conv(g, p, "local.down", h, 2, 1)?;
        h = norm_relu(g, h);
        h = g.add(h, global)?;
        for j in 0..self.config.n_resblocks_local {
            h = res_block(g, p, &format!("local.res{j}"), h)?;
        }
        h = nn::conv_transpose(g, p, "local.up", h, 2, 1, 1)?;
        h = norm_relu(g, h);
        nn::reflect_conv(g, p, "local.head", h, 3)
    }

    /// Record the forward pass on `g` with parameters already bound as `p`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound<'_>,
        x: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        self.check_input(g.value(x), mode)?;
        match mode {
            ForwardMode::GlobalNative => {
                let feats = self.global_trunk(g, p, x)?;
                let logits = nn::reflect_conv(g, p, "global.head", feats, 3)?;
                Ok(g.unit_tanh(logits))
            }
            ForwardMode::CoarseUpsampled => {
                let half = g.avg_pool2(x)?;
                let feats = self.global_trunk(g, p, half)?;
                let logits = nn::reflect_conv(g, p, "global.head", feats, 3)?;
                let up = g.upsample2(logits);
                Ok(g.unit_tanh(up))
            }
            ForwardMode::Full => {
                let half = g.avg_pool2(x)?;
                let feats = self.global_trunk(g, p, half)?;
                let coarse = nn::reflect_conv(g, p, "global.head", feats, 3)?;
                let coarse = g.upsample2(coarse);
                let local = self.local_logits(g, p, x, feats)?;
                let sum = g.add(coarse, local)?;
                Ok(g.unit_tanh(sum))
            }
        }
    }

    fn check_input(&self, x: &Tensor, mode: ForwardMode) -> Result<()> {
        if x.channels() != self.config.n_channels {
            return Err(Error::shape(format!(
                "generator expects {} channels, got {}",
                self.config.n_channels,
                x.channels()
            )));
        }
        let divisor = match mode {
            ForwardMode::GlobalNative => self.config.divisor() / 2,
            _ => self.config.divisor(),
        };
        let (h, w) = (x.height(), x.width());
        // reflection padding at the deepest level needs at least 2 pixels
        if h % divisor != 0 || w % divisor != 0 || h < 2 * divisor || w < 2 * divisor {
            return Err(Error::Divisibility {
                height: h,
                width: w,
                divisor,
            });
        }
        Ok(())
    }

    /// Synthesize all channels for a batch under the current stage.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_tensor_mode(x, self.stage.into())
    }

    pub fn forward_tensor_mode(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &p, xv, mode)?;
        Ok(g.value(out).clone())
    }

    /// `G(X)`: every channel synthesized from the gated stack.
    pub fn forward(&self, x: &MultiChannelImage) -> Result<MultiChannelImage> {
        if !x.is_normalized() {
            return Err(Error::invalid("generator input must be normalized"));
        }
        let out = self.forward_tensor(&x.to_tensor())?;
        MultiChannelImage::from_tensor(x.registry().clone(), &out, true)
    }

    /// Zero the local enhancer head so the full stage reproduces the coarse output.
    pub fn zero_enhancer_head(&mut self) {
        for name in ["local.head.weight", "local.head.bias"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Whether a parameter belongs to the global (coarse) network.
    pub fn is_global_param(name: &str) -> bool {
        name.starts_with("global.")
    }
}
