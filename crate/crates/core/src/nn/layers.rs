//! Layers with explicit forward/backward passes.
//!
//! Every layer works on a single sample (no batch axis). `forward` caches
//! what `backward` needs; `infer` computes the same output without touching
//! the cache so a loaded model can be shared read-only. Parameter gradients
//! accumulate across `backward` calls until `zero_grad`.

use std::hash::Hasher;

use super::{init::xavier_init, Scalar, Tensor};
use crate::error::{Error, Result};

/// Named access to parameter tensors, used by the optimizer, checkpoints
/// and the gradient checker.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    /// Hash of the discrete decisions made in the last `forward` (ReLU
    /// masks, pooling winners). Finite differences are only valid when a
    /// perturbation leaves this unchanged.
    fn kink_signature(&self, _h: &mut dyn Hasher) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| {
            p.require_grad();
            p.zero_grad();
        });
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn with_grad<T: Scalar>(mut t: Tensor<T>) -> Tensor<T> {
    t.require_grad();
    t
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    input: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, seed: u64) -> Result<Self> {
        let weight = xavier_init(&[out_features, in_features], seed)?;
        Self::from_params(weight, Tensor::zeros(&[out_features]))
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([out, _], [b]) if out == b => Ok(Linear {
                weight: with_grad(weight),
                bias: with_grad(bias),
                input: None,
            }),
            _ => Err(Error::shape(
                "linear",
                "weight (out, in) and bias (out)",
                weight.shape(),
            )),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, inp) = (self.out_features(), self.in_features());
        if x.shape() != [inp] {
            return Err(Error::shape("linear", format!("[{inp}]"), x.shape()));
        }
        let mut y = self.bias.data().to_vec();
        T::gemm(
            out,
            inp,
            1,
            T::one(),
            self.weight.data(),
            (inp, 1),
            x.data(),
            (1, 1),
            T::one(),
            &mut y,
            (1, 1),
        );
        Tensor::new(vec![out], y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.data().to_vec());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, inp) = (self.out_features(), self.in_features());
        if dy.shape() != [out] {
            return Err(Error::shape("linear.backward", format!("[{out}]"), dy.shape()));
        }
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::shape("linear.backward", "a preceding forward", &[]))?;
        let (w, dw) = self.weight.data_and_grad_mut();
        // dW += dy x^T
        T::gemm(out, 1, inp, T::one(), dy.data(), (1, 1), x, (inp, 1), T::one(), dw, (inp, 1));
        let (_, db) = self.bias.data_and_grad_mut();
        for (g, &d) in db.iter_mut().zip(dy.data()) {
            *g = *g + d;
        }
        // dx = W^T dy
        let mut dx = vec![T::zero(); inp];
        T::gemm(inp, out, 1, T::one(), w, (1, inp), dy.data(), (1, 1), T::zero(), &mut dx, (1, 1));
        Tensor::new(vec![inp], dx)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct ConvCache<T> {
    col: Vec<T>,
    in_shape: [usize; 3],
}

/// 2-D convolution over `(channels, height, width)` inputs, square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    padding: usize,
    input_grad: bool,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        let weight = xavier_init(&[out_channels, in_channels, kernel, kernel], seed)?;
        Self::from_params(weight, Tensor::zeros(&[out_channels]), stride, padding)
    }

    pub fn from_params(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([o, _, kh, kw], [b]) if o == b && kh == kw && stride > 0 => Ok(Conv2d {
                weight: with_grad(weight),
                bias: with_grad(bias),
                stride,
                padding,
                input_grad: true,
                cache: None,
            }),
            _ => Err(Error::shape(
                "conv2d",
                "weight (out, in, k, k), bias (out), stride > 0",
                weight.shape(),
            )),
        }
    }

    /// Skips the input gradient in `backward` (returns zeros). For layers
    /// that read raw data.
    pub fn without_input_grad(mut self) -> Self {
        self.input_grad = false;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<([usize; 3], usize, usize)> {
        let c = self.in_channels();
        match x.shape() {
            &[xc, h, w] if xc == c => match self.output_size(h, w) {
                Some((ho, wo)) => Ok(([xc, h, w], ho, wo)),
                None => Err(Error::shape("conv2d", "input at least kernel-sized", x.shape())),
            },
            _ => Err(Error::shape("conv2d", format!("[{c}, H, W]"), x.shape())),
        }
    }

    /// Output columns `ox` whose input column `ox * s + kj - p` lies in `[0, w)`.
    fn valid_cols(&self, kj: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
        let hi = if w + p > kj { ((w - 1 + p - kj) / s + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[T], [c, h, w]: [usize; 3], ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let n = ho * wo;
        let mut col = vec![T::zero(); c * k * k * n];
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    let row = &mut col[((ci * k + ki) * k + kj) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        let first = lo * s + kj - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[first + j * s];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], [c, h, w]: [usize; 3], ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let n = ho * wo;
        let mut x = vec![T::zero(); c * h * w];
        for ci in 0..c {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    let row = &col[((ci * k + ki) * k + kj) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * wo..][..wo];
                        let first = lo * s + kj - p;
                        for (j, &g) in src[lo..hi].iter().enumerate() {
                            let d = &mut dst[first + j * s];
                            *d = *d + g;
                        }
                    }
                }
            }
        }
        x
    }

    fn compute(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (in_shape, ho, wo) = self.geometry(x)?;
        let col = self.im2col(x.data(), in_shape, ho, wo);
        let o = self.out_channels();
        let kk = in_shape[0] * self.kernel() * self.kernel();
        let n = ho * wo;
        let mut y = Vec::with_capacity(o * n);
        for &b in self.bias.data() {
            y.extend(std::iter::repeat_n(b, n));
        }
        T::gemm(o, kk, n, T::one(), self.weight.data(), (kk, 1), &col, (n, 1), T::one(), &mut y, (n, 1));
        Ok((Tensor::new(vec![o, ho, wo], y)?, ConvCache { col, in_shape }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.compute(x).map(|(y, _)| y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.compute(x)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::shape("conv2d.backward", "a preceding forward", &[]))?;
        let [c, h, w] = cache.in_shape;
        let (ho, wo) = self.output_size(h, w).expect("validated in forward");
        let o = self.out_channels();
        if dy.shape() != [o, ho, wo] {
            return Err(Error::shape(
                "conv2d.backward",
                format!("[{o}, {ho}, {wo}]"),
                dy.shape(),
            ));
        }
        let k = self.kernel();
        let kk = c * k * k;
        let n = ho * wo;
        let (wdata, dw) = self.weight.data_and_grad_mut();
        // dW += dY col^T
        T::gemm(o, n, kk, T::one(), dy.data(), (n, 1), &cache.col, (1, n), T::one(), dw, (kk, 1));
        let (_, db) = self.bias.data_and_grad_mut();
        for (oc, g) in db.iter_mut().enumerate() {
            let s: T = dy.data()[oc * n..(oc + 1) * n].iter().copied().sum();
            *g = *g + s;
        }
        if !self.input_grad {
            return Ok(Tensor::zeros(&[c, h, w]));
        }
        // dcol = W^T dY
        let mut dcol = vec![T::zero(); kk * n];
        T::gemm(kk, o, n, T::one(), wdata, (1, kk), dy.data(), (n, 1), T::zero(), &mut dcol, (n, 1));
        let dx = self.col2im(&dcol, cache.in_shape, ho, wo);
        Tensor::new(vec![c, h, w], dx)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.data().iter().map(|&v| v.max(T::zero())).collect();
        Tensor::new(x.shape().to_vec(), y)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.mask = x.data().iter().map(|&v| v > T::zero()).collect();
        self.infer(x)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.len() != self.mask.len() {
            return Err(Error::shape("relu.backward", format!("{} values", self.mask.len()), dy.shape()));
        }
        let dx = dy
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Tensor::new(dy.shape().to_vec(), dx)
    }

    fn signature(&self, h: &mut dyn Hasher) {
        for chunk in self.mask.chunks(64) {
            let word = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &b)| acc | (u64::from(b) << i));
            h.write_u64(word);
        }
    }
}

// ---------------------------------------------------------------------------

/// Max pooling with window == stride; trailing rows/cols that do not fill a
/// window are dropped.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    size: usize,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        assert!(size > 0, "pool size must be positive");
        MaxPool2d {
            size,
            argmax: Vec::new(),
            in_shape: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn compute<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let &[c, h, w] = x.shape() else {
            return Err(Error::shape("max_pool", "[C, H, W]", x.shape()));
        };
        let s = self.size;
        let (ho, wo) = (h / s, w / s);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("max_pool", format!("spatial dims >= {s}"), x.shape()));
        }
        let xd = x.data();
        let mut y = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            let base = ci * h * w;
            for oy in 0..ho {
                let row0 = base + oy * s * w;
                for ox in 0..wo {
                    let start = row0 + ox * s;
                    let mut best = start;
                    let mut best_v = xd[start];
                    for dy in 0..s {
                        let r = start + dy * w;
                        for (dx, &v) in xd[r..r + s].iter().enumerate() {
                            if v > best_v {
                                best_v = v;
                                best = r + dx;
                            }
                        }
                    }
                    y.push(best_v);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::new(vec![c, ho, wo], y)?, arg))
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.compute(x).map(|(y, _)| y)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = self.compute(x)?;
        self.argmax = arg;
        self.in_shape = x.shape().to_vec();
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.len() != self.argmax.len() {
            return Err(Error::shape("max_pool.backward", format!("{} values", self.argmax.len()), dy.shape()));
        }
        let mut dx = vec![T::zero(); self.in_shape.iter().product()];
        for (&g, &i) in dy.data().iter().zip(&self.argmax) {
            dx[i] = dx[i] + g;
        }
        Tensor::new(self.in_shape.clone(), dx)
    }

    fn signature(&self, h: &mut dyn Hasher) {
        for &i in &self.argmax {
            h.write_usize(i);
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Flatten {
    in_shape: Vec<usize>,
}

impl Flatten {
    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.clone().reshape(&[x.len()])
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.in_shape = x.shape().to_vec();
        self.infer(x)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        dy.clone().reshape(&self.in_shape)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Layer<T: Scalar> {
    Linear(Linear<T>),
    Conv2d(Conv2d<T>),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    Flatten(Flatten),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2d(_) => "max_pool",
            Layer::Flatten(_) => "flatten",
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Conv2d(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::MaxPool2d(l) => l.infer(x),
            Layer::Flatten(l) => l.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Linear(l) => l.backward(dy),
            Layer::Conv2d(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::MaxPool2d(l) => l.backward(dy),
            Layer::Flatten(l) => l.backward(dy),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Layer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Layer::Linear(l) => l.visit_params(prefix, f),
            Layer::Conv2d(l) => l.visit_params(prefix, f),
            _ => {}
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Layer::Linear(l) => l.visit_params_mut(prefix, f),
            Layer::Conv2d(l) => l.visit_params_mut(prefix, f),
            _ => {}
        }
    }

    fn kink_signature(&self, h: &mut dyn Hasher) {
        match self {
            Layer::Relu(l) => l.signature(h),
            Layer::MaxPool2d(l) => l.signature(h),
            _ => {}
        }
    }
}

/// Chain of layers; parameters are named `<index>.weight` / `<index>.bias`.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T: Scalar> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    fn locate(err: Error, index: usize, kind: &str) -> Error {
        match err {
            Error::Shape { layer, expected, got } => Error::Shape {
                layer: format!("layer {index} ({kind}): {layer}"),
                expected,
                got,
            },
            other => other,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.infer(&cur).map_err(|e| Self::locate(e, i, layer.kind()))?;
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            cur = layer.forward(&cur).map_err(|e| Self::locate(e, i, kind))?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = dy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let kind = layer.kind();
            cur = layer.backward(&cur).map_err(|e| Self::locate(e, i, kind))?;
        }
        Ok(cur)
    }

    /// One forward pass, a loss head returning `(loss, dloss/doutput)`, and
    /// the matching backward pass. Fails on non-finite loss or gradients.
    pub fn forward_backward<F>(&mut self, x: &Tensor<T>, loss_head: F) -> Result<f64>
    where
        F: FnOnce(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
    {
        let y = self.forward(x)?;
        let (loss, dy) = loss_head(&y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                iteration: None,
            });
        }
        self.backward(&dy)?;
        let mut bad = None;
        self.visit_params("", &mut |name, p| {
            if bad.is_none() && !p.is_finite() {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                iteration: None,
            }),
            None => Ok(loss),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Sequential<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn kink_signature(&self, h: &mut dyn Hasher) {
        for layer in &self.layers {
            layer.kink_signature(h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_mask() {
        let mut r = Relu::default();
        let y = r.forward(&Tensor::<f64>::from_slice(&[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let dx = r.backward(&Tensor::from_slice(&[5.0, 6.0, 7.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 7.0]);
    }

    #[test]
    fn same_padding_conv_keeps_spatial_size() {
        let conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, 0).unwrap();
        let y = conv.infer(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert_eq!(y.shape(), &[4, 16, 16]);
        let strided = Conv2d::<f32>::new(3, 4, 3, 2, 1, 0).unwrap();
        assert_eq!(strided.infer(&Tensor::zeros(&[3, 16, 16])).unwrap().shape(), &[4, 8, 8]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let conv = Conv2d::<f64>::new(2, 3, 3, 1, 1, 9).unwrap();
        let x = Tensor::new(vec![2, 5, 4], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = conv.infer(&x).unwrap();
        let w = conv.weight.data();
        for o in 0..3 {
            for oy in 0..5 {
                for ox in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (iy, ix) = (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    acc += w[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data()[(c * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 5 + oy) * 4 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let mut pool = MaxPool2d::new(2);
        let x = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = pool.backward(&Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut net = Sequential::new(vec![
            Layer::Linear(Linear::<f32>::new(4, 3, 0).unwrap()),
            Layer::Relu(Relu::default()),
            Layer::Linear(Linear::new(5, 2, 1).unwrap()),
        ]);
        let err = net.forward(&Tensor::zeros(&[4])).unwrap_err();
        assert!(err.to_string().contains("layer 2 (linear)"), "{err}");
    }

    #[test]
    fn perfect_fit_linear_has_zero_loss_and_grads() {
        let w = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut net = Sequential::new(vec![Layer::Linear(
            Linear::from_params(w, Tensor::zeros(&[2])).unwrap(),
        )]);
        net.zero_grad();
        let loss = net
            .forward_backward(&Tensor::from_slice(&[3.0, 4.0]), |y| {
                Ok(crate::nn::squared_error(y, &[3.0, 4.0]))
            })
            .unwrap();
        assert_eq!(loss, 0.0);
        net.visit_params("", &mut |_, p| assert!(p.grad().unwrap().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn param_names_are_unique_and_dotted() {
        let net = Sequential::new(vec![
            Layer::Conv2d(Conv2d::<f32>::new(3, 4, 3, 1, 1, 0).unwrap()),
            Layer::Relu(Relu::default()),
            Layer::Flatten(Flatten::default()),
            Layer::Linear(Linear::new(4, 2, 1).unwrap()),
        ]);
        let mut names = Vec::new();
        net.visit_params("backbone", &mut |n, _| names.push(n));
        assert_eq!(
            names,
            ["backbone.0.weight", "backbone.0.bias", "backbone.3.weight", "backbone.3.bias"]
        );
    }
}
