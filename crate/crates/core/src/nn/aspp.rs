use rand_chacha::rand_core::RngCore;

use super::layers::{upsample_bilinear, upsample_bilinear_backward, Conv2d, ConvSpec, FrozenBatchNorm2d, GlobalAvgPool, Relu, Sequential};
use super::{join, Mode, Module, ParamVisitor, ParamVisitorMut};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AsppConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub rates: Vec<usize>,
    pub num_classes: usize,
}

impl AsppConfig {
    pub fn standard(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            channels: 256,
            rates: vec![6, 12, 18],
            num_classes,
        }
    }

    pub fn compact(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            channels: 32,
            rates: vec![2, 4, 6],
            num_classes,
        }
    }
}

fn conv_bn_relu<T: Scalar, R: RngCore>(spec: ConvSpec, rng: &mut R) -> Sequential<T> {
    let c = spec.out_channels;
    Sequential::new()
        .with("0", Conv2d::new(spec, rng))
        .with("1", FrozenBatchNorm2d::new(c))
        .with("2", Relu::new())
}

/// Atrous spatial pyramid pooling followed by a 3x3 head and a 1x1
/// classifier producing `num_classes` logits at feature resolution.
pub struct Aspp<T> {
    config: AsppConfig,
    branches: Vec<Sequential<T>>,
    pooling: Sequential<T>,
    project: Sequential<T>,
    head: Sequential<T>,
    classifier: Conv2d<T>,
    pool_dims: Option<(usize, usize)>,
}

impl<T: Scalar> Aspp<T> {
    pub fn new<R: RngCore>(config: AsppConfig, rng: &mut R) -> Self {
        let (cin, c) = (config.in_channels, config.channels);
        let mut branches = vec![conv_bn_relu(ConvSpec::new(cin, c, 1), rng)];
        for &r in &config.rates {
            branches.push(conv_bn_relu(ConvSpec::new(cin, c, 3).dilation(r), rng));
        }
        let pooling = Sequential::new()
            .with("0", GlobalAvgPool::default())
            .with("1", Conv2d::new(ConvSpec::new(cin, c, 1), rng))
            .with("2", FrozenBatchNorm2d::new(c))
            .with("3", Relu::new());
        let project = conv_bn_relu(ConvSpec::new(c * (branches.len() + 1), c, 1), rng);
        let head = conv_bn_relu(ConvSpec::new(c, c, 3), rng);
        let classifier = Conv2d::new(ConvSpec::new(c, config.num_classes, 1).with_bias(), rng);
        Self {
            config,
            branches,
            pooling,
            project,
            head,
            classifier,
            pool_dims: None,
        }
    }

    pub fn config(&self) -> &AsppConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Replaces only the classifier.
    pub fn reset_classifier<R: RngCore>(&mut self, num_classes: usize, rng: &mut R) {
        self.config.num_classes = num_classes;
        self.classifier = Conv2d::new(ConvSpec::new(self.config.channels, num_classes, 1).with_bias(), rng);
    }
}

impl<T: Scalar> Module<T> for Aspp<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (_, _, h, w) = x.dims4();
        let mut outs: Vec<Tensor<T>> = self.branches.iter_mut().map(|b| b.forward(x, mode)).collect();
        let pooled = self.pooling.forward(x, mode);
        outs.push(upsample_bilinear(&pooled, h, w));
        self.pool_dims = Some((h, w));
        let cat = Tensor::concat_channels(&outs.iter().collect::<Vec<_>>());
        let p = self.project.forward(&cat, mode);
        let hd = self.head.forward(&p, mode);
        self.classifier.forward(&hd, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.classifier.backward(dy);
        let g = self.head.backward(&g);
        let g = self.project.backward(&g);
        let c = self.config.channels;
        let mut parts = g.split_channels(&vec![c; self.branches.len() + 1]);
        let pooled_grad = parts.pop().expect("pooling branch gradient");
        let mut dx: Option<Tensor<T>> = None;
        for (b, part) in self.branches.iter_mut().zip(&parts) {
            let d = b.backward(part);
            match &mut dx {
                Some(acc) => acc.add_assign(&d),
                None => dx = Some(d),
            }
        }
        let (n, _, _, _) = pooled_grad.dims4();
        let dpool = upsample_bilinear_backward(&pooled_grad, &[n, c, 1, 1]);
        let mut dx = dx.expect("at least one branch");
        dx.add_assign(&self.pooling.backward(&dpool));
        dx
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        let aspp = join(prefix, "aspp");
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(&aspp, &format!("convs.{i}")), f);
        }
        self.pooling.visit(&join(&aspp, &format!("convs.{}", self.branches.len())), f);
        self.project.visit(&join(&aspp, "project"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        let aspp = join(prefix, "aspp");
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(&aspp, &format!("convs.{i}")), f);
        }
        self.pooling.visit_mut(&join(&aspp, &format!("convs.{}", self.branches.len())), f);
        self.project.visit_mut(&join(&aspp, "project"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
