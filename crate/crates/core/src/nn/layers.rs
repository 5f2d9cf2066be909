use rand_chacha::rand_core::RngCore;
use rayon::prelude::*;

use super::{join, Mode, Module, Param, ParamVisitor, ParamVisitorMut};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NO_CACHE: &str = "backward called without a train-mode forward pass";

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Also resets padding so the receptive field stays centred.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding - span) / self.stride + 1;
        let ow = (w + 2 * self.padding - span) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

fn im2col<T: Scalar>(x: &[T], channels: usize, g: &Geometry, col: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..channels {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * plane;
                for oy in 0..g.oh {
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], channels: usize, g: &Geometry, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..channels {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * plane;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Grouped, dilated 2-D convolution lowered to im2col + GEMM.
pub struct Conv2d<T> {
    spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    /// Skip computing the input gradient (first layer of a network).
    pub propagate_input_grad: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights (fan-in), zero bias.
    pub fn new<R: RngCore>(spec: ConvSpec, rng: &mut R) -> Self {
        assert!(spec.groups > 0 && spec.in_channels.is_multiple_of(spec.groups) && spec.out_channels.is_multiple_of(spec.groups));
        let fan_in = spec.patch_len();
        let std = (2.0 / fan_in as f64).sqrt();
        let shape = [spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel];
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng::normal(rng) * std)).collect();
        Self {
            spec,
            weight: Param::new(Tensor::from_vec(&shape, data)),
            bias: spec.bias.then(|| Param::new(Tensor::zeros(&[spec.out_channels]))),
            propagate_input_grad: true,
            cache: None,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.spec.out_dims(h, w);
        Geometry {
            h,
            w,
            oh,
            ow,
            k: self.spec.kernel,
            stride: self.spec.stride,
            pad: self.spec.padding,
            dil: self.spec.dilation,
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let s = self.spec;
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, s.in_channels, "conv expects {} input channels, got {c}", s.in_channels);
        let g = self.geometry(h, w);
        let p = g.oh * g.ow;
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let k = s.patch_len();
        let mut out = Tensor::zeros(&[n, s.out_channels, g.oh, g.ow]);
        let xd = x.data();
        let wd = self.weight.value.data();
        let bias = self.bias.as_ref().map(|b| b.value.data());
        // Batch elements are independent and write disjoint output slices.
        out.data_mut()
            .par_chunks_mut(s.out_channels * p)
            .zip(xd.par_chunks(c * h * w))
            .for_each(|(ob, xb)| {
                let mut col = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                for gi in 0..s.groups {
                    let xs = &xb[gi * cin_g * h * w..][..cin_g * h * w];
                    let cols: &[T] = if s.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, cin_g, &g, &mut col);
                        &col
                    };
                    let wg = &wd[gi * cout_g * k..][..cout_g * k];
                    let og = &mut ob[gi * cout_g * p..][..cout_g * p];
                    T::gemm(cout_g, k, p, T::one(), wg, (k, 1), cols, (p, 1), T::zero(), og, (p, 1));
                }
                if let Some(bias) = bias {
                    for (plane, &bv) in ob.chunks_mut(p).zip(bias) {
                        for v in plane {
                            *v += bv;
                        }
                    }
                }
            });
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect(NO_CACHE);
        let s = self.spec;
        let (n, c, h, w) = x.dims4();
        let g = self.geometry(h, w);
        let p = g.oh * g.ow;
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let k = s.patch_len();
        assert_eq!(dy.shape(), &[n, s.out_channels, g.oh, g.ow], "conv grad shape");

        let propagate = self.propagate_input_grad;
        let mut dx = Tensor::zeros(if propagate { x.shape() } else { &[0] });
        let wd = self.weight.value.data();
        let per_sample = c * h * w;
        let dx_slots: Vec<Option<&mut [T]>> = if propagate {
            dx.data_mut().chunks_mut(per_sample).map(Some).collect()
        } else {
            (0..n).map(|_| None).collect()
        };
        // Per-sample weight gradients, summed afterwards in batch order so
        // the result does not depend on scheduling.
        let partials: Vec<Vec<T>> = dx_slots
            .into_par_iter()
            .enumerate()
            .map(|(b, mut dxb)| {
                let xb = &x.data()[b * per_sample..][..per_sample];
                let dyb = &dy.data()[b * s.out_channels * p..][..s.out_channels * p];
                let mut dw = vec![T::zero(); s.out_channels * k];
                let mut col = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                let mut dcol = if propagate { vec![T::zero(); k * p] } else { Vec::new() };
                for gi in 0..s.groups {
                    let xs = &xb[gi * cin_g * h * w..][..cin_g * h * w];
                    let cols: &[T] = if s.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, cin_g, &g, &mut col);
                        &col
                    };
                    let dyg = &dyb[gi * cout_g * p..][..cout_g * p];
                    let dwg = &mut dw[gi * cout_g * k..][..cout_g * k];
                    T::gemm(cout_g, p, k, T::one(), dyg, (p, 1), cols, (1, p), T::zero(), dwg, (k, 1));
                    if let Some(dxb) = dxb.as_deref_mut() {
                        let wg = &wd[gi * cout_g * k..][..cout_g * k];
                        T::gemm(k, cout_g, p, T::one(), wg, (1, k), dyg, (p, 1), T::zero(), &mut dcol, (p, 1));
                        let dxs = &mut dxb[gi * cin_g * h * w..][..cin_g * h * w];
                        if s.is_pointwise() {
                            for (d, v) in dxs.iter_mut().zip(&dcol) {
                                *d += *v;
                            }
                        } else {
                            col2im(&dcol, cin_g, &g, dxs);
                        }
                    }
                }
                dw
            })
            .collect();
        let gw = self.weight.grad.data_mut();
        for part in &partials {
            for (a, b) in gw.iter_mut().zip(part) {
                *a += *b;
            }
        }
        if let Some(bias) = &mut self.bias {
            let db = bias.grad.data_mut();
            for b in 0..n {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += dy.data()[(b * s.out_channels + oc) * p..][..p].iter().copied().sum::<T>();
                }
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalization with fixed running statistics: a per-channel affine
/// map whose scale and shift are trainable.
pub struct FrozenBatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: f64,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> FrozenBatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::new(Tensor::full(&[channels], T::one())),
            bias: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
            eps: 1e-5,
            cache: None,
        }
    }

    fn inv_std(&self) -> Vec<T> {
        let eps = T::lit(self.eps);
        self.running_var.value.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
    }
}

impl<T: Scalar> Module<T> for FrozenBatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let p = h * w;
        let inv = self.inv_std();
        let mut out = x.clone();
        let (wt, bs, mean) = (self.weight.value.data(), self.bias.value.data(), self.running_mean.value.data());
        for b in 0..n {
            for ch in 0..c {
                let scale = wt[ch] * inv[ch];
                let shift = bs[ch] - mean[ch] * scale;
                for v in &mut out.data_mut()[(b * c + ch) * p..][..p] {
                    *v = *v * scale + shift;
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect(NO_CACHE);
        let (n, c, h, w) = x.dims4();
        let p = h * w;
        let inv = self.inv_std();
        let mut dx = dy.clone();
        let wt = self.weight.value.data().to_vec();
        let mean = self.running_mean.value.data().to_vec();
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                let mut sw = T::zero();
                let mut sb = T::zero();
                for (&g, &xv) in dy.data()[off..off + p].iter().zip(&x.data()[off..off + p]) {
                    sw += g * (xv - mean[ch]) * inv[ch];
                    sb += g;
                }
                dw[ch] += sw;
                db[ch] += sb;
                let scale = wt[ch] * inv[ch];
                for v in &mut dx.data_mut()[off..off + p] {
                    *v *= scale;
                }
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Rectifier, optionally clipped from above (ReLU6).
pub struct Relu {
    cap: Option<f64>,
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { cap: None, mask: None }
    }

    pub fn six() -> Self {
        Self {
            cap: Some(6.0),
            mask: None,
        }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Module<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let cap = self.cap.map(T::lit);
        let mut out = x.clone();
        let mut mask = Vec::with_capacity(if mode == Mode::Train { x.len() } else { 0 });
        for v in out.data_mut() {
            let pass = *v > T::zero() && cap.is_none_or(|c| *v < c);
            if *v <= T::zero() {
                *v = T::zero();
            } else if let Some(c) = cap {
                if *v > c {
                    *v = c;
                }
            }
            if mode == Mode::Train {
                mask.push(pass);
            }
        }
        if mode == Mode::Train {
            self.mask = Some(mask);
        }
        out
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect(NO_CACHE);
        let mut dx = dy.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = T::zero();
            }
        }
        dx
    }

    fn visit(&self, _: &str, _: &mut ParamVisitor<'_, T>) {}

    fn visit_mut(&mut self, _: &str, _: &mut ParamVisitorMut<'_, T>) {}
}

/// Max pooling; padded positions never win.
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = Vec::with_capacity(out.len());
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[(plane * oh + oy) * ow + ox] = best;
                    arg.push(best_i);
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((arg, x.shape().to_vec()));
        }
        out
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (arg, shape) = self.cache.take().expect(NO_CACHE);
        let mut dx = Tensor::zeros(&shape);
        for (&i, &g) in arg.iter().zip(dy.data()) {
            dx.data_mut()[i] += g;
        }
        dx
    }

    fn visit(&self, _: &str, _: &mut ParamVisitor<'_, T>) {}

    fn visit_mut(&mut self, _: &str, _: &mut ParamVisitorMut<'_, T>) {}
}

/// Mean over the spatial axes, `[N, C, H, W] -> [N, C, 1, 1]`.
#[derive(Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let p = h * w;
        let inv = T::one() / T::from_usize(p).expect("plane size fits scalar");
        let data = x.data().chunks(p).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        if mode == Mode::Train {
            self.cache = Some(x.shape().to_vec());
        }
        Tensor::from_vec(&[n, c, 1, 1], data)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.cache.take().expect(NO_CACHE);
        let p = shape[2] * shape[3];
        let inv = T::one() / T::from_usize(p).expect("plane size fits scalar");
        let data = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, p)).collect();
        Tensor::from_vec(&shape, data)
    }

    fn visit(&self, _: &str, _: &mut ParamVisitor<'_, T>) {}

    fn visit_mut(&mut self, _: &str, _: &mut ParamVisitorMut<'_, T>) {}
}

/// Named children run in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Module<T>>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Module<T> + 'static) -> &mut Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Module<T> + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut iter = self.layers.iter_mut();
        let Some((_, first)) = iter.next() else {
            return x.clone();
        };
        let mut h = first.forward(x, mode);
        for (_, layer) in iter {
            h = layer.forward(&h, mode);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (name, layer) in &self.layers {
            layer.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        for (name, layer) in &mut self.layers {
            layer.visit_mut(&join(prefix, name), f);
        }
    }
}

/// `(i0, i1, lambda)` per output coordinate, half-pixel centres.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `(out_h, out_w)`.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = axis_taps(h, out_h);
    let tx: Vec<(usize, usize, T)> = axis_taps(w, out_w).into_iter().map(|(a, b, l)| (a, b, T::lit(l))).collect();
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let xd = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(out_h * out_w).enumerate() {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * lx;
                dst[oy * out_w + ox] = top + (bottom - top) * ly;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`] for an input of shape `in_shape`.
pub fn upsample_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, c, out_h, out_w) = dy.dims4();
    let (h, w) = (in_shape[2], in_shape[3]);
    assert_eq!(&in_shape[..2], &[n, c], "upsample backward shape");
    let ty = axis_taps(h, out_h);
    let tx: Vec<(usize, usize, T)> = axis_taps(w, out_w).into_iter().map(|(a, b, l)| (a, b, T::lit(l))).collect();
    let mut dx = Tensor::zeros(in_shape);
    let dyd = dy.data();
    for (plane, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let src = &dyd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                let gt = g * (T::one() - ly);
                let gb = g * ly;
                dst[y0 * w + x0] += gt * (T::one() - lx);
                dst[y0 * w + x1] += gt * lx;
                dst[y1 * w + x0] += gb * (T::one() - lx);
                dst[y1 * w + x1] += gb * lx;
            }
        }
    }
    dx
}
