use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::aspp::{Aspp, AsppConfig};
use super::backbone::{Encoder, MobileNetV2, ResNet, ResNetDepth, ToyEncoder};
use super::layers::{upsample_bilinear, upsample_bilinear_backward};
use super::{join, weights, Mode, Module, ParamVisitor, ParamVisitorMut};
use crate::rng;
use crate::scalar::Scalar;
use crate::taxonomy::ClassTaxonomy;
use crate::tensor::Tensor;

/// Input channels of every encoder (grayscale replicated or RGB).
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("CONFIG_ERROR: {0}")]
    Config(String),
    #[error("WEIGHTS_NOT_FOUND: {0}")]
    WeightsNotFound(String),
    #[error("SHAPE_MISMATCH: `{name}` expects {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("SHAPE_MISMATCH: parameter `{0}` missing from weights")]
    MissingParameter(String),
    #[error("SHAPE_MISMATCH: expected {expected} values in total, weights provide {found}")]
    ParameterCount { expected: usize, found: usize },
    #[error("unreadable weights: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $tag:literal $(| $alias:literal)*),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub fn tag(self) -> &'static str {
                match self { $($name::$variant => $tag),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.tag())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($tag $(| $alias)* => Ok($name::$variant),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($name))),
                }
            }
        }

        impl TryFrom<String> for $name {
            type Error = String;
            fn try_from(s: String) -> Result<Self, String> { s.parse() }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String { v.tag().to_string() }
        }
    };
}

named_enum!(BackboneFamily {
    MobilenetV2 => "mobilenet_v2" | "mobilenet",
    Resnet50 => "resnet_50" | "resnet50",
    Resnet101 => "resnet_101" | "resnet101",
    Resnet101x2 => "resnet_101_2x" | "resnet101_2x",
    Toy => "toy",
});

named_enum!(PretrainSource {
    SupervisedImagenet => "supervised" | "supervised_imagenet",
    ContrastiveImagenet => "contrastive" | "contrastive_imagenet",
    Random => "random",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub pretrain_source: PretrainSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn new(family: BackboneFamily, pretrain_source: PretrainSource) -> Self {
        Self {
            family,
            pretrain_source,
            weights_path: None,
        }
    }

    pub fn with_weights(mut self, path: impl Into<PathBuf>) -> Self {
        self.weights_path = Some(path.into());
        self
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), ModelError> {
        match (self.family, self.pretrain_source) {
            (BackboneFamily::MobilenetV2, PretrainSource::ContrastiveImagenet) => Err(ModelError::Config(
                "contrastive weights are not available for mobilenet_v2".into(),
            )),
            (BackboneFamily::Toy, PretrainSource::Random) => {
                if self.weights_path.is_some() {
                    Err(ModelError::Config("the toy backbone never loads external weights".into()))
                } else {
                    Ok(())
                }
            }
            (BackboneFamily::Toy, src) => Err(ModelError::Config(format!(
                "the toy backbone only supports random init, got `{src}`"
            ))),
            _ => Ok(()),
        }
    }
}

/// Encoder + ASPP decoder, logits upsampled to the input resolution.
pub struct SegModel<T: Scalar> {
    family: BackboneFamily,
    encoder: Box<dyn Encoder<T>>,
    decoder: Aspp<T>,
    /// Train only the decoder; encoder gradients stay exactly zero.
    pub freeze_encoder: bool,
    shapes: Option<(Vec<usize>, Vec<usize>)>,
}

impl<T: Scalar> SegModel<T> {
    pub fn family(&self) -> BackboneFamily {
        self.family
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes()
    }

    pub fn encoder(&self) -> &dyn Encoder<T> {
        self.encoder.as_ref()
    }

    pub fn encoder_mut(&mut self) -> &mut dyn Encoder<T> {
        self.encoder.as_mut()
    }

    /// Swaps the classifier for one with `num_classes` outputs.
    pub fn rebuild_head(&mut self, num_classes: usize, seed: u64) {
        self.decoder
            .reset_classifier(num_classes, &mut rng::stream(seed, "init/head", num_classes as u64));
    }

    /// `(name, shape)` of every stored tensor, in visiting order.
    pub fn parameter_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.value.shape().to_vec())));
        out
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

impl<T: Scalar> Module<T> for SegModel<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (_, _, h, w) = x.dims4();
        let enc_mode = if self.freeze_encoder { Mode::Eval } else { mode };
        let feats = self.encoder.forward(x, enc_mode);
        let logits = self.decoder.forward(&feats, mode);
        let out = upsample_bilinear(&logits, h, w);
        if mode == Mode::Train {
            self.shapes = Some((x.shape().to_vec(), logits.shape().to_vec()));
        }
        out
    }

    /// Returns an empty tensor: input gradients are never needed.
    fn backward(&mut self, dlogits: &Tensor<T>) -> Tensor<T> {
        let (_, small) = self.shapes.take().expect("backward without train-mode forward");
        let g = upsample_bilinear_backward(dlogits, &small);
        let g = self.decoder.backward(&g);
        if !self.freeze_encoder {
            self.encoder.backward(&g);
        }
        Tensor::zeros(&[0])
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

fn make_encoder<T: Scalar>(family: BackboneFamily, seed: u64) -> Box<dyn Encoder<T>> {
    let mut r = rng::stream(seed, "init/encoder", 0);
    match family {
        BackboneFamily::Toy => Box::new(ToyEncoder::new(INPUT_CHANNELS, &mut r)),
        BackboneFamily::MobilenetV2 => Box::new(MobileNetV2::new(&mut r)),
        BackboneFamily::Resnet50 => Box::new(ResNet::new(ResNetDepth::D50, 1, &mut r)),
        BackboneFamily::Resnet101 => Box::new(ResNet::new(ResNetDepth::D101, 1, &mut r)),
        BackboneFamily::Resnet101x2 => Box::new(ResNet::new(ResNetDepth::D101, 2, &mut r)),
    }
}

/// [`build_model_with_seed`] with seed 0.
pub fn build_model<T: Scalar>(spec: &BackboneSpec, taxonomy: &ClassTaxonomy) -> Result<SegModel<T>, ModelError> {
    build_model_with_seed(spec, taxonomy, 0)
}

/// Builds the network, loading encoder weights unless the source is random.
/// The decoder is always freshly initialized from `seed`.
pub fn build_model_with_seed<T: Scalar>(
    spec: &BackboneSpec,
    taxonomy: &ClassTaxonomy,
    seed: u64,
) -> Result<SegModel<T>, ModelError> {
    spec.validate()?;
    let weights = if spec.pretrain_source == PretrainSource::Random {
        None
    } else {
        let path = spec
            .weights_path
            .as_ref()
            .ok_or_else(|| ModelError::WeightsNotFound(format!("no weights path given for `{}`", spec.pretrain_source)))?;
        if !path.is_file() {
            return Err(ModelError::WeightsNotFound(path.display().to_string()));
        }
        Some(weights::adapt(spec.family, weights::read_tensor_file(path)?))
    };
    let encoder = make_encoder::<T>(spec.family, seed);
    let aspp = if spec.family == BackboneFamily::Toy {
        AsppConfig::compact(encoder.out_channels(), taxonomy.num_classes())
    } else {
        AsppConfig::standard(encoder.out_channels(), taxonomy.num_classes())
    };
    let decoder = Aspp::new(aspp, &mut rng::stream(seed, "init/decoder", 0));
    let mut model = SegModel {
        family: spec.family,
        encoder,
        decoder,
        freeze_encoder: false,
        shapes: None,
    };
    if let Some(map) = weights {
        let report = weights::load_named(model.encoder.as_mut(), &map)?;
        if !report.unused.is_empty() {
            log::warn!("{} tensors in the weights file were not used", report.unused.len());
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_entropy, LogitField};
    use crate::nn::count_values;
    use crate::taxonomy::{make_taxonomy, TaxonomyVariant};

    fn four() -> ClassTaxonomy {
        make_taxonomy(TaxonomyVariant::FourClass)
    }

    #[test]
    fn head_has_taxonomy_width() {
        let six = make_taxonomy(TaxonomyVariant::SixClass);
        let mut m = build_model::<f32>(&BackboneSpec::new(BackboneFamily::Toy, PretrainSource::Random), &six).unwrap();
        assert_eq!(m.num_classes(), 6);
        let y = m.forward(&Tensor::zeros(&[2, 3, 20, 18]), Mode::Eval);
        assert_eq!(y.shape(), &[2, 6, 20, 18]);
    }

    #[test]
    fn rebuilding_head_touches_only_classifier() {
        let mut m = build_model::<f32>(&BackboneSpec::new(BackboneFamily::Toy, PretrainSource::Random), &four()).unwrap();
        let before = m.parameter_manifest();
        m.rebuild_head(6, 1);
        let after = m.parameter_manifest();
        let changed: Vec<_> = before.iter().zip(&after).filter(|(a, b)| a != b).map(|(a, _)| a.0.clone()).collect();
        assert_eq!(changed, vec!["decoder.classifier.weight", "decoder.classifier.bias"]);
    }

    #[test]
    fn config_errors() {
        let t = four();
        let mob = BackboneSpec::new(BackboneFamily::MobilenetV2, PretrainSource::ContrastiveImagenet);
        assert!(matches!(build_model::<f32>(&mob, &t), Err(ModelError::Config(_))));
        let toy = BackboneSpec::new(BackboneFamily::Toy, PretrainSource::SupervisedImagenet);
        assert!(matches!(build_model::<f32>(&toy, &t), Err(ModelError::Config(_))));
        let missing = BackboneSpec::new(BackboneFamily::Resnet50, PretrainSource::SupervisedImagenet)
            .with_weights("/nonexistent/weights.safetensors");
        assert!(matches!(build_model::<f32>(&missing, &t), Err(ModelError::WeightsNotFound(_))));
        let none = BackboneSpec::new(BackboneFamily::Resnet50, PretrainSource::SupervisedImagenet);
        assert!(matches!(build_model::<f32>(&none, &t), Err(ModelError::WeightsNotFound(_))));
    }

    #[test]
    fn family_tags_round_trip() {
        for f in BackboneFamily::ALL {
            assert_eq!(f.tag().parse::<BackboneFamily>().unwrap(), *f);
        }
        for s in PretrainSource::ALL {
            assert_eq!(s.tag().parse::<PretrainSource>().unwrap(), *s);
        }
    }

    #[test]
    fn resnet101_contrastive_head_has_four_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r101.mxw");
        let donor = build_model::<f32>(&BackboneSpec::new(BackboneFamily::Resnet101, PretrainSource::Random), &four()).unwrap();
        weights::export_encoder(&donor, &path).unwrap();
        let spec = BackboneSpec::new(BackboneFamily::Resnet101, PretrainSource::ContrastiveImagenet).with_weights(&path);
        let m = build_model_with_seed::<f32>(&spec, &four(), 5).unwrap();
        assert_eq!(m.num_classes(), 4);
        let mut a = Vec::new();
        donor.encoder().visit("", &mut |_, p| a.push(p.value.clone()));
        let mut b = Vec::new();
        m.encoder().visit("", &mut |_, p| b.push(p.value.clone()));
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_encoder_gets_zero_gradient() {
        let mut m = build_model::<f64>(&BackboneSpec::new(BackboneFamily::Toy, PretrainSource::Random), &four()).unwrap();
        m.freeze_encoder = true;
        let x = crate::nn::layers::tests::random_input(&[1, 3, 8, 8], 1);
        let target: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        m.zero_grad();
        let logits = m.forward(&x, Mode::Train);
        let out = cross_entropy(&LogitField::new(logits).unwrap(), &target, 255).unwrap();
        m.backward(&out.grad);
        let mut enc_nonzero = 0;
        let mut dec_nonzero = 0;
        m.visit("", &mut |n, p| {
            let nz = p.grad.data().iter().filter(|v| **v != 0.0).count();
            if n.starts_with("encoder.") {
                enc_nonzero += nz;
            } else {
                dec_nonzero += nz;
            }
        });
        assert_eq!(enc_nonzero, 0);
        assert!(dec_nonzero > 0);
        assert!(count_values(&m, true) < 1_000_000);
    }

    #[test]
    fn full_model_gradient_matches_finite_difference() {
        let mut m = build_model::<f64>(&BackboneSpec::new(BackboneFamily::Toy, PretrainSource::Random), &four()).unwrap();
        let x = crate::nn::layers::tests::random_input(&[1, 3, 6, 6], 2);
        let target: Vec<u8> = (0..36).map(|i| ((i / 3) % 4) as u8).collect();
        m.zero_grad();
        let logits = m.forward(&x, Mode::Train);
        let out = cross_entropy(&LogitField::new(logits).unwrap(), &target, 255).unwrap();
        m.backward(&out.grad);
        let probe = ["encoder.stage0.conv.weight", "encoder.stage3.conv.bias", "decoder.aspp.convs.4.1.weight", "decoder.classifier.weight"];
        for name in probe {
            let mut analytic = 0.0;
            m.visit("", &mut |n, p| {
                if n == name {
                    analytic = p.grad.data()[1];
                }
            });
            let loss_at = |delta: f64, m: &mut SegModel<f64>| {
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[1] += delta;
                    }
                });
                let l = cross_entropy(&LogitField::new(m.forward(&x, Mode::Eval)).unwrap(), &target, 255)
                    .unwrap()
                    .value;
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[1] -= delta;
                    }
                });
                l
            };
            let h = 1e-5;
            let fd = (loss_at(h, &mut m) - loss_at(-h, &mut m)) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "{name}: fd {fd} vs {analytic}");
        }
    }
}
