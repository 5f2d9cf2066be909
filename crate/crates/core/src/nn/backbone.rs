//! Encoders. Parameter names follow the torchvision layouts so that external
//! checkpoints map onto them after prefix stripping.

use rand_chacha::rand_core::RngCore;

use super::layers::{Conv2d, ConvSpec, FrozenBatchNorm2d, MaxPool2d, Relu, Sequential};
use super::{join, Mode, Module, ParamVisitor, ParamVisitorMut};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A feature extractor feeding the segmentation decoder.
pub trait Encoder<T: Scalar>: Module<T> {
    fn out_channels(&self) -> usize;
    /// Ratio of input to feature-map resolution.
    fn output_stride(&self) -> usize;
}

fn conv_bn<T: Scalar, R: RngCore>(spec: ConvSpec, relu: Option<Relu>, rng: &mut R) -> Sequential<T> {
    let out = spec.out_channels;
    let mut s = Sequential::new()
        .with("0", Conv2d::new(spec, rng))
        .with("1", FrozenBatchNorm2d::new(out));
    if let Some(r) = relu {
        s.push("2", r);
    }
    s
}

enum Shortcut<T> {
    None,
    Identity,
    Projection(Sequential<T>),
}

/// `act(main(x) + shortcut(x))`.
struct Residual<T> {
    main: Sequential<T>,
    main_name: Option<&'static str>,
    shortcut: Shortcut<T>,
    out_relu: bool,
    mask: Option<Vec<bool>>,
}

impl<T: Scalar> Module<T> for Residual<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = self.main.forward(x, mode);
        match &mut self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => y.add_assign(x),
            Shortcut::Projection(p) => y.add_assign(&p.forward(x, mode)),
        }
        if self.out_relu {
            let mut mask = Vec::new();
            for v in y.data_mut() {
                let pos = *v > T::zero();
                if !pos {
                    *v = T::zero();
                }
                if mode == Mode::Train {
                    mask.push(pos);
                }
            }
            if mode == Mode::Train {
                self.mask = Some(mask);
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        if self.out_relu {
            let mask = self.mask.take().expect("backward without train-mode forward");
            for (v, m) in g.data_mut().iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        let mut dx = self.main.backward(&g);
        match &mut self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => dx.add_assign(&g),
            Shortcut::Projection(p) => dx.add_assign(&p.backward(&g)),
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        let main_prefix = self.main_name.map_or_else(|| prefix.to_string(), |n| join(prefix, n));
        self.main.visit(&main_prefix, f);
        if let Shortcut::Projection(p) = &self.shortcut {
            p.visit(&join(prefix, "downsample"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        let main_prefix = self.main_name.map_or_else(|| prefix.to_string(), |n| join(prefix, n));
        self.main.visit_mut(&main_prefix, f);
        if let Shortcut::Projection(p) = &mut self.shortcut {
            p.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

/// Small plain convolutional encoder for CPU-scale runs.
pub struct ToyEncoder<T> {
    body: Sequential<T>,
    out_channels: usize,
}

impl<T: Scalar> ToyEncoder<T> {
    pub const CHANNELS: [usize; 4] = [16, 32, 48, 64];
    const STRIDES: [usize; 4] = [2, 1, 1, 1];
    const DILATIONS: [usize; 4] = [1, 1, 2, 2];

    pub fn new<R: RngCore>(in_channels: usize, rng: &mut R) -> Self {
        let mut body = Sequential::new();
        let mut c_in = in_channels;
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            let spec = ConvSpec::new(c_in, c, 3)
                .stride(Self::STRIDES[i])
                .dilation(Self::DILATIONS[i])
                .with_bias();
            let mut conv = Conv2d::new(spec, rng);
            conv.propagate_input_grad = i > 0;
            body.push(format!("stage{i}.conv"), conv);
            body.push(format!("stage{i}.relu"), Relu::new());
            c_in = c;
        }
        Self {
            body,
            out_channels: c_in,
        }
    }
}

impl<T: Scalar> Module<T> for ToyEncoder<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.body.forward(x, mode)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.body.backward(dy)
    }
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.body.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.body.visit_mut(prefix, f)
    }
}

impl<T: Scalar> Encoder<T> for ToyEncoder<T> {
    fn out_channels(&self) -> usize {
        self.out_channels
    }
    fn output_stride(&self) -> usize {
        Self::STRIDES.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResNetDepth {
    D50,
    D101,
}

impl ResNetDepth {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Self::D50 => [3, 4, 6, 3],
            Self::D101 => [3, 4, 23, 3],
        }
    }
}

/// Bottleneck ResNet with a dilated last stage (output stride 16).
/// `width` multiplies every channel count, as in the 2x variants.
pub struct ResNet<T> {
    stem: Sequential<T>,
    layers: Vec<Sequential<T>>,
    out_channels: usize,
}

impl<T: Scalar> ResNet<T> {
    const EXPANSION: usize = 4;

    pub fn new<R: RngCore>(depth: ResNetDepth, width: usize, rng: &mut R) -> Self {
        let base = 64 * width;
        let mut conv1 = Conv2d::new(ConvSpec::new(3, base, 7).stride(2), rng);
        conv1.propagate_input_grad = false;
        let stem = Sequential::new()
            .with("conv1", conv1)
            .with("bn1", FrozenBatchNorm2d::new(base))
            .with("relu", Relu::new())
            .with("maxpool", MaxPool2d::new(3, 2, 1));

        let mut in_c = base;
        let mut dilation = 1;
        let mut layers = Vec::with_capacity(4);
        for (li, &blocks) in depth.blocks().iter().enumerate() {
            let planes = base << li;
            let (mut stride, previous_dilation) = (if li == 0 { 1 } else { 2 }, dilation);
            if li == 3 {
                dilation *= stride;
                stride = 1;
            }
            let mut layer = Sequential::new();
            for b in 0..blocks {
                let (s, d) = if b == 0 { (stride, previous_dilation) } else { (1, dilation) };
                let out_c = planes * Self::EXPANSION;
                let main = Sequential::new()
                    .with("conv1", Conv2d::new(ConvSpec::new(in_c, planes, 1), rng))
                    .with("bn1", FrozenBatchNorm2d::new(planes))
                    .with("relu1", Relu::new())
                    .with("conv2", Conv2d::new(ConvSpec::new(planes, planes, 3).stride(s).dilation(d), rng))
                    .with("bn2", FrozenBatchNorm2d::new(planes))
                    .with("relu2", Relu::new())
                    .with("conv3", Conv2d::new(ConvSpec::new(planes, out_c, 1), rng))
                    .with("bn3", FrozenBatchNorm2d::new(out_c));
                let shortcut = if s != 1 || in_c != out_c {
                    Shortcut::Projection(conv_bn(ConvSpec::new(in_c, out_c, 1).stride(s).padding(0), None, rng))
                } else {
                    Shortcut::Identity
                };
                layer.push(
                    b.to_string(),
                    Residual {
                        main,
                        main_name: None,
                        shortcut,
                        out_relu: true,
                        mask: None,
                    },
                );
                in_c = out_c;
            }
            layers.push(layer);
        }
        Self {
            stem,
            layers,
            out_channels: in_c,
        }
    }
}

impl<T: Scalar> Module<T> for ResNet<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut h = self.stem.forward(x, mode);
        for l in &mut self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        self.stem.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.stem.visit(prefix, f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.stem.visit_mut(prefix, f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{}", i + 1)), f);
        }
    }
}

impl<T: Scalar> Encoder<T> for ResNet<T> {
    fn out_channels(&self) -> usize {
        self.out_channels
    }
    fn output_stride(&self) -> usize {
        16
    }
}

/// MobileNetV2 feature stack, last downsampling replaced by dilation.
pub struct MobileNetV2<T> {
    features: Sequential<T>,
}

impl<T: Scalar> MobileNetV2<T> {
    pub const OUT_CHANNELS: usize = 1280;
    // (expansion, channels, repeats, stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];

    pub fn new<R: RngCore>(rng: &mut R) -> Self {
        let mut features = Sequential::new();
        let mut stem_conv = Conv2d::new(ConvSpec::new(3, 32, 3).stride(2), rng);
        stem_conv.propagate_input_grad = false;
        features.push(
            "0",
            Sequential::new()
                .with("0", stem_conv)
                .with("1", FrozenBatchNorm2d::new(32))
                .with("2", Relu::six()),
        );
        let mut in_c = 32;
        let mut idx = 1;
        let mut current_stride = 2;
        let mut dilation = 1;
        for (t, c, n, s) in Self::SETTINGS {
            let (stage_stride, stage_dilation) = if current_stride >= 16 && s > 1 {
                dilation *= s;
                (1, dilation)
            } else {
                current_stride *= s;
                (s, dilation)
            };
            for i in 0..n {
                let stride = if i == 0 { stage_stride } else { 1 };
                let hidden = in_c * t;
                let mut main = Sequential::new();
                let mut k = 0;
                if t != 1 {
                    main.push(k.to_string(), conv_bn(ConvSpec::new(in_c, hidden, 1), Some(Relu::six()), rng));
                    k += 1;
                }
                main.push(
                    k.to_string(),
                    conv_bn(
                        ConvSpec::new(hidden, hidden, 3).stride(stride).dilation(stage_dilation).groups(hidden),
                        Some(Relu::six()),
                        rng,
                    ),
                );
                main.push((k + 1).to_string(), Conv2d::new(ConvSpec::new(hidden, c, 1), rng));
                main.push((k + 2).to_string(), FrozenBatchNorm2d::new(c));
                let shortcut = if stride == 1 && in_c == c {
                    Shortcut::Identity
                } else {
                    Shortcut::None
                };
                features.push(
                    idx.to_string(),
                    Residual {
                        main,
                        main_name: Some("conv"),
                        shortcut,
                        out_relu: false,
                        mask: None,
                    },
                );
                idx += 1;
                in_c = c;
            }
        }
        features.push(
            idx.to_string(),
            conv_bn(ConvSpec::new(in_c, Self::OUT_CHANNELS, 1), Some(Relu::six()), rng),
        );
        Self { features }
    }
}

impl<T: Scalar> Module<T> for MobileNetV2<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.features.forward(x, mode)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.features.backward(dy)
    }
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.features.visit(&join(prefix, "features"), f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.features.visit_mut(&join(prefix, "features"), f)
    }
}

impl<T: Scalar> Encoder<T> for MobileNetV2<T> {
    fn out_channels(&self) -> usize {
        Self::OUT_CHANNELS
    }
    fn output_stride(&self) -> usize {
        16
    }
}
