//! Named parameter storage and the layer helpers shared by the generator and
//! the discriminators.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Record every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Replace all tensors, checking names and shapes.
    pub fn load(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::invalid("parameter names do not match the architecture"));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// A [`ParamStore`] bound to graph variables.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initializer: weights `N(0, 0.02)`, biases zero.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("positive std"),
        }
    }

    fn gaussian(&mut self, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("sized from shape")
    }

    /// Convolution `in_ch -> out_ch` with a `k`x`k` kernel.
    pub fn conv(&mut self, store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, k: usize) {
        store.push(format!("{name}.weight"), self.gaussian([out_ch, in_ch, k, k]));
        store.push(format!("{name}.bias"), Tensor::zeros([out_ch, 1, 1, 1]));
    }

    /// Transposed convolution `in_ch -> out_ch`.
    pub fn conv_transpose(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) {
        store.push(format!("{name}.weight"), self.gaussian([in_ch, out_ch, k, k]));
        store.push(format!("{name}.bias"), Tensor::zeros([out_ch, 1, 1, 1]));
    }
}

pub(crate) fn conv(
    g: &mut Graph,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    g.conv2d(x, w, Some(b), stride, pad)
}

pub(crate) fn conv_transpose(
    g: &mut Graph,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    g.conv_transpose2d(x, w, Some(b), stride, pad, out_pad)
}

/// Reflection-padded convolution with "same" output size (odd kernel).
pub(crate) fn reflect_conv(
    g: &mut Graph,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    pad: usize,
) -> Result<Var> {
    let padded = g.reflect_pad(x, pad)?;
    conv(g, p, name, padded, 1, 0)
}
