use std::collections::BTreeMap;

use super::config::{OptimizerConfig, OptimizerKind};
use crate::nn::{Module, SegModel};
use crate::scalar::Scalar;

/// Adam or SGD with per-parameter state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub learning_rate: f64,
    pub step: u64,
    /// First moment (Adam) or momentum buffer (SGD).
    pub first: BTreeMap<String, Vec<T>>,
    /// Second moment (Adam only).
    pub second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, learning_rate: f64) -> Self {
        Self {
            config,
            learning_rate,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Parameters whose name starts with a prefix in `skip` are left alone.
    pub fn apply(&mut self, model: &mut SegModel<T>, skip: &[&str]) {
        self.step += 1;
        let c = self.config.clone();
        let lr = T::lit(self.learning_rate);
        let wd = T::lit(c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let eps = T::lit(c.eps);
        let mom = T::lit(c.momentum);
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut("", &mut |name, p| {
            if !p.trainable || skip.iter().any(|s| name.starts_with(s)) {
                return;
            }
            let n = p.value.len();
            let m = first.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            match c.kind {
                OptimizerKind::Adam => {
                    let v = second.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
                    for i in 0..n {
                        let g = p.grad.data()[i] + wd * p.value.data()[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let mh = m[i] / bias1;
                        let vh = v[i] / bias2;
                        p.value.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        let g = p.grad.data()[i] + wd * p.value.data()[i];
                        m[i] = mom * m[i] + g;
                        p.value.data_mut()[i] -= lr * m[i];
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, BackboneFamily, BackboneSpec, PretrainSource};
    use crate::taxonomy::{make_taxonomy, TaxonomyVariant};

    fn toy() -> SegModel<f64> {
        build_model(
            &BackboneSpec::new(BackboneFamily::Toy, PretrainSource::Random),
            &make_taxonomy(TaxonomyVariant::FourClass),
        )
        .unwrap()
    }

    fn first_param(m: &SegModel<f64>, name: &str) -> Vec<f64> {
        let mut out = Vec::new();
        m.visit("", &mut |n, p| {
            if n == name {
                out = p.value.data().to_vec();
            }
        });
        out
    }

    fn set_grad(m: &mut SegModel<f64>, g: f64) {
        m.visit_mut("", &mut |_, p| {
            if p.trainable {
                p.grad.fill(g);
            }
        });
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * g / (|g| + eps).
        let mut m = toy();
        let before = first_param(&m, "decoder.classifier.bias");
        set_grad(&mut m, 0.5);
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1e-3);
        opt.apply(&mut m, &[]);
        let after = first_param(&m, "decoder.classifier.bias");
        for (a, b) in after.iter().zip(&before) {
            assert!((b - a - 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_with_momentum_accumulates() {
        let mut m = toy();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 0.1);
        let before = first_param(&m, "decoder.classifier.bias");
        set_grad(&mut m, 1.0);
        opt.apply(&mut m, &[]);
        opt.apply(&mut m, &[]);
        let after = first_param(&m, "decoder.classifier.bias");
        // steps of 0.1 then 0.1 * 1.9
        assert!((before[0] - after[0] - 0.29).abs() < 1e-12);
    }

    #[test]
    fn skipped_and_buffer_params_stay_fixed() {
        let mut m = toy();
        let enc = first_param(&m, "encoder.stage0.conv.weight");
        let rv = first_param(&m, "decoder.head.1.running_var");
        set_grad(&mut m, 1.0);
        Optimizer::new(OptimizerConfig::default(), 0.1).apply(&mut m, &["encoder."]);
        assert_eq!(first_param(&m, "encoder.stage0.conv.weight"), enc);
        assert_eq!(first_param(&m, "decoder.head.1.running_var"), rv);
    }
}
