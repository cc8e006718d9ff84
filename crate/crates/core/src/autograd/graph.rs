use rayon::prelude::*;

use super::kernels::{col2im, conv_out_len, gemm, im2col, ConvGeometry, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    UnitTanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ChannelMask {
        x: Var,
        mask: Vec<f64>,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MseConst {
        x: Var,
        target: f64,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        items: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Every operation records its output value; [`Graph::backward`]
/// walks the tape from a scalar root.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 2-D convolution with square kernel and zero padding. Weight is `[Co, Ci, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d weight {ws:?} does not match input {xs:?}"
            )));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(format!(
                "conv2d kernel {} larger than padded input {xs:?}",
                ws[2]
            )));
        }
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (co, ho, wo) = (ws[0], geom.out_height(), geom.out_width());
        let mut out = Tensor::zeros([xs[0], co, ho, wo]);
        {
            let input = self.value(x);
            let weight = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let per_item = co * ho * wo;
            out.data_mut()
                .par_chunks_mut(per_item)
                .enumerate()
                .for_each(|(i, dst)| {
                    let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
                    im2col(input.item_slice(i), &geom, &mut cols);
                    gemm(
                        Mat::new(weight, co, geom.col_rows()),
                        Mat::new(&cols, geom.col_rows(), geom.col_cols()),
                        0.0,
                        dst,
                    );
                    if let Some(bias) = bias {
                        for (c, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                            chunk.iter_mut().for_each(|v| *v += bias[c]);
                        }
                    }
                });
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed convolution (fractionally strided). Weight is `[Ci, Co, k, k]`;
    /// output size is `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv_transpose2d weight {ws:?} does not match input {xs:?}"
            )));
        }
        if out_pad >= stride {
            return Err(Error::invalid("output padding must be smaller than stride"));
        }
        let k = ws[2];
        let ho = (xs[2] - 1) * stride + k + out_pad - 2 * pad;
        let wo = (xs[3] - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeometry {
            channels: ws[1],
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_height(), xs[2]);
        debug_assert_eq!(geom.out_width(), xs[3]);
        let (ci, co) = (ws[0], ws[1]);
        let mut out = Tensor::zeros([xs[0], co, ho, wo]);
        {
            let input = self.value(x);
            let weight = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            out.data_mut()
                .par_chunks_mut(co * ho * wo)
                .enumerate()
                .for_each(|(i, dst)| {
                    let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
                    gemm(
                        Mat::new(weight, ci, geom.col_rows()).t(),
                        Mat::new(input.item_slice(i), ci, geom.col_cols()),
                        0.0,
                        &mut cols,
                    );
                    col2im(&cols, &geom, dst);
                    if let Some(bias) = bias {
                        for (c, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                            chunk.iter_mut().for_each(|v| *v += bias[c]);
                        }
                    }
                });
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if pad >= h || pad >= w {
            return Err(Error::shape(format!(
                "reflection pad {pad} needs spatial size > {pad}, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for b in 0..n {
            for ch in 0..c {
                let s = src.plane(b, ch);
                let d = out.plane_mut(b, ch);
                for oy in 0..ho {
                    let iy = reflect(oy as isize - pad as isize, h);
                    for ox in 0..wo {
                        let ix = reflect(ox as isize - pad as isize, w);
                        d[oy * wo + ox] = s[iy * w + ix];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ReflectPad { x, pad }, rg))
    }

    /// Per-(item, channel) normalization to zero mean and unit variance, no affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let [n, c, _, _] = src.shape();
        let len = src.plane_len() as f64;
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let p = out.plane_mut(b, ch);
                let mean = p.iter().sum::<f64>() / len;
                let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
                let inv = 1.0 / (var + eps).sqrt();
                p.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// `(tanh(x) + 1) / 2`, a bounded activation onto `[0, 1]`.
    pub fn unit_tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * (v.tanh() + 1.0));
        let rg = self.rg(x);
        self.push(out, Op::UnitTanh { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Multiply every `(item, channel)` plane by a constant; `mask` has `batch * channels` entries.
    pub fn channel_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let [n, c, _, _] = self.value(x).shape();
        if mask.len() != n * c {
            return Err(Error::shape(format!(
                "channel mask of length {} for {n}x{c} planes",
                mask.len()
            )));
        }
        let mut out = self.value(x).clone();
        for b in 0..n {
            for ch in 0..c {
                let m = mask[b * c + ch];
                out.plane_mut(b, ch).iter_mut().for_each(|v| *v *= m);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelMask { x, mask }, rg))
    }

    /// 2x2 average pooling with stride 2 (odd trailing row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = avg_pool2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = upsample2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let mut out = Tensor::zeros([sa[0], sa[1] + sb[1], sa[2], sa[3]]);
        for i in 0..sa[0] {
            let (va, vb) = (self.value(a).item_slice(i), self.value(b).item_slice(i));
            let n = va.len() + vb.len();
            let dst = &mut out.data_mut()[i * n..(i + 1) * n];
            dst[..va.len()].copy_from_slice(va);
            dst[va.len()..].copy_from_slice(vb);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Mean squared deviation from a constant target (scalar output).
    pub fn mse_const(&mut self, x: Var, target: f64) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|v| (v - target) * (v - target)).sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MseConst { x, target }, rg)
    }

    /// Mean absolute difference (scalar output).
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "l1 between {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / ta.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::L1Mean { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let mut acc = 0.0;
        for &v in items {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("sum expects scalar nodes"));
            }
            acc += t.item();
        }
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(acc),
            Op::Sum {
                items: items.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Grads(grads);
        }
        let mut seed = self.value(root).clone();
        seed.data_mut().fill(1.0);
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Grads(grads)
    }

    fn backprop(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(x, w, b, stride, pad, gy, grads),
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_transpose2d_backward(x, w, b, stride, pad, &node.value, gy, grads),
            &Op::ReflectPad { x, pad } => {
                if !self.rg(x) {
                    return;
                }
                let [n, c, h, w] = self.value(x).shape();
                let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                let mut gx = Tensor::zeros([n, c, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let s = gy.plane(bi, ch);
                        let d = gx.plane_mut(bi, ch);
                        for oy in 0..ho {
                            let iy = reflect(oy as isize - pad as isize, h);
                            for ox in 0..wo {
                                let ix = reflect(ox as isize - pad as isize, w);
                                d[iy * w + ix] += s[oy * wo + ox];
                            }
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                if !self.rg(*x) {
                    return;
                }
                let y = &node.value;
                let [n, c, _, _] = y.shape();
                let len = y.plane_len() as f64;
                let mut gx = Tensor::zeros(y.shape());
                for bi in 0..n {
                    for ch in 0..c {
                        let (yp, gp) = (y.plane(bi, ch), gy.plane(bi, ch));
                        let mean_g = gp.iter().sum::<f64>() / len;
                        let mean_gy = gp.iter().zip(yp).map(|(g, y)| g * y).sum::<f64>() / len;
                        let inv = inv_std[bi * c + ch];
                        for ((d, &g), &yv) in gx.plane_mut(bi, ch).iter_mut().zip(gp).zip(yp) {
                            *d = inv * (g - mean_g - yv * mean_gy);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                let gx = zip_map(gy, xv, |g, v| if v > 0.0 { g } else { 0.0 });
                accumulate(grads, x, gx);
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let gx = zip_map(gy, xv, |g, v| if v > 0.0 { g } else { slope * g });
                accumulate(grads, x, gx);
            }
            &Op::UnitTanh { x } => {
                let gx = zip_map(gy, &node.value, |g, y| g * 2.0 * y * (1.0 - y));
                accumulate(grads, x, gx);
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    accumulate(grads, a, gy.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, gy.clone());
                }
            }
            Op::ChannelMask { x, mask } => {
                let mut gx = gy.clone();
                let [n, c, _, _] = gx.shape();
                for bi in 0..n {
                    for ch in 0..c {
                        let m = mask[bi * c + ch];
                        gx.plane_mut(bi, ch).iter_mut().for_each(|v| *v *= m);
                    }
                }
                accumulate(grads, *x, gx);
            }
            &Op::AvgPool2 { x } => {
                let [n, c, h, w] = self.value(x).shape();
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = Tensor::zeros([n, c, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let s = gy.plane(bi, ch);
                        let d = gx.plane_mut(bi, ch);
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = 0.25 * s[oy * wo + ox];
                                d[2 * oy * w + 2 * ox] += g;
                                d[2 * oy * w + 2 * ox + 1] += g;
                                d[(2 * oy + 1) * w + 2 * ox] += g;
                                d[(2 * oy + 1) * w + 2 * ox + 1] += g;
                            }
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(x).shape();
                let wo = 2 * w;
                let mut gx = Tensor::zeros([n, c, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let s = gy.plane(bi, ch);
                        let d = gx.plane_mut(bi, ch);
                        for y in 0..2 * h {
                            for xx in 0..wo {
                                d[(y / 2) * w + xx / 2] += s[y * wo + xx];
                            }
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::Concat { a, b } => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let (na, nb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for i in 0..sa[0] {
                    let src = gy.item_slice(i);
                    ga.data_mut()[i * na..(i + 1) * na].copy_from_slice(&src[..na]);
                    gb.data_mut()[i * nb..(i + 1) * nb].copy_from_slice(&src[na..]);
                }
                if self.rg(a) {
                    accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    accumulate(grads, b, gb);
                }
            }
            &Op::MseConst { x, target } => {
                let xv = self.value(x);
                let k = 2.0 * gy.item() / xv.len() as f64;
                accumulate(grads, x, xv.map(|v| k * (v - target)));
            }
            &Op::L1Mean { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let k = gy.item() / va.len() as f64;
                let ga = zip_map(va, vb, |p, q| k * sign(p - q));
                if self.rg(b) {
                    accumulate(grads, b, ga.map(|v| -v));
                }
                if self.rg(a) {
                    accumulate(grads, a, ga);
                }
            }
            &Op::Scale { x, factor } => accumulate(grads, x, gy.map(|v| v * factor)),
            Op::Sum { items } => {
                for &v in items {
                    if self.rg(v) {
                        accumulate(grads, v, gy.clone());
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let ws = wv.shape();
        let geom = ConvGeometry {
            channels: xv.channels(),
            height: xv.height(),
            width: xv.width(),
            kernel: ws[2],
            stride,
            pad,
        };
        let (co, rows, cols_n) = (ws[0], geom.col_rows(), geom.col_cols());
        let need_x = self.rg(x);
        let need_w = self.rg(w);

        let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..xv.batch())
            .into_par_iter()
            .map(|i| {
                let gyi = gy.item_slice(i);
                let mut cols = vec![0.0; rows * cols_n];
                let gw = need_w.then(|| {
                    im2col(xv.item_slice(i), &geom, &mut cols);
                    let mut gw = vec![0.0; co * rows];
                    gemm(
                        Mat::new(gyi, co, cols_n),
                        Mat::new(&cols, rows, cols_n).t(),
                        0.0,
                        &mut gw,
                    );
                    gw
                });
                let gx = need_x.then(|| {
                    gemm(
                        Mat::new(wv.data(), co, rows).t(),
                        Mat::new(gyi, co, cols_n),
                        0.0,
                        &mut cols,
                    );
                    let mut gx = vec![0.0; xv.item_slice(i).len()];
                    col2im(&cols, &geom, &mut gx);
                    gx
                });
                (gw, gx)
            })
            .collect();

        if need_w {
            let mut gw = Tensor::zeros(ws);
            for (part, _) in &per_item {
                for (d, s) in gw.data_mut().iter_mut().zip(part.as_ref().unwrap()) {
                    *d += s;
                }
            }
            accumulate(grads, w, gw);
        }
        if need_x {
            let mut data = Vec::with_capacity(xv.len());
            for (_, part) in per_item {
                data.extend(part.unwrap());
            }
            accumulate(grads, x, Tensor::from_vec(xv.shape(), data).unwrap());
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            accumulate(grads, b, bias_grad(gy));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        y: &Tensor,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let ws = wv.shape();
        let geom = ConvGeometry {
            channels: ws[1],
            height: y.height(),
            width: y.width(),
            kernel: ws[2],
            stride,
            pad,
        };
        let (ci, rows, cols_n) = (ws[0], geom.col_rows(), geom.col_cols());
        let need_x = self.rg(x);
        let need_w = self.rg(w);

        let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..xv.batch())
            .into_par_iter()
            .map(|i| {
                let mut cols = vec![0.0; rows * cols_n];
                im2col(gy.item_slice(i), &geom, &mut cols);
                let gw = need_w.then(|| {
                    let mut gw = vec![0.0; ci * rows];
                    gemm(
                        Mat::new(xv.item_slice(i), ci, cols_n),
                        Mat::new(&cols, rows, cols_n).t(),
                        0.0,
                        &mut gw,
                    );
                    gw
                });
                let gx = need_x.then(|| {
                    let mut gx = vec![0.0; ci * cols_n];
                    gemm(
                        Mat::new(wv.data(), ci, rows),
                        Mat::new(&cols, rows, cols_n),
                        0.0,
                        &mut gx,
                    );
                    gx
                });
                (gw, gx)
            })
            .collect();

        if need_w {
            let mut gw = Tensor::zeros(ws);
            for (part, _) in &per_item {
                for (d, s) in gw.data_mut().iter_mut().zip(part.as_ref().unwrap()) {
                    *d += s;
                }
            }
            accumulate(grads, w, gw);
        }
        if need_x {
            let mut data = Vec::with_capacity(xv.len());
            for (_, part) in per_item {
                data.extend(part.unwrap());
            }
            accumulate(grads, x, Tensor::from_vec(xv.shape(), data).unwrap());
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            accumulate(grads, b, bias_grad(gy));
        }
    }
}

fn bias_grad(gy: &Tensor) -> Tensor {
    let [n, c, _, _] = gy.shape();
    let mut gb = Tensor::zeros([c, 1, 1, 1]);
    for bi in 0..n {
        for ch in 0..c {
            gb.data_mut()[ch] += gy.plane(bi, ch).iter().sum::<f64>();
        }
    }
    gb
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// 2x2 average pooling on a plain tensor.
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = t.shape();
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("cannot average-pool {h}x{w} by 2")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let s = t.plane(b, ch);
            let d = out.plane_mut(b, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    d[oy * wo + ox] = 0.25
                        * (s[2 * oy * w + 2 * ox]
                            + s[2 * oy * w + 2 * ox + 1]
                            + s[(2 * oy + 1) * w + 2 * ox]
                            + s[(2 * oy + 1) * w + 2 * ox + 1]);
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling on a plain tensor.
pub fn upsample2(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let wo = 2 * w;
    let mut out = Tensor::zeros([n, c, 2 * h, wo]);
    for b in 0..n {
        for ch in 0..c {
            let s = t.plane(b, ch);
            let d = out.plane_mut(b, ch);
            for y in 0..2 * h {
                for x in 0..wo {
                    d[y * wo + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
    }
    out
}

/// Output side length of a convolution, exposed for shape arithmetic.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    conv_out_len(len, kernel, stride, pad)
}
