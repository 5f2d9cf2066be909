mod common;

use common::*;
use mixseg::losses::LossKind;
use mixseg::rng;
use proptest::prelude::*;

fn instance(seed: u64, c: usize, h: usize, w: usize) -> Instance {
    Instance::random(&mut rng::stream(seed, "loss-oracle", 0), 2, c, h, w, 0.1)
}

#[test]
fn uniform_logits_give_log_classes() {
    let mut inst = instance(3, 4, 3, 3);
    inst.logits.iter_mut().for_each(|v| *v = 0.25);
    let out = library_loss(&inst, LossKind::Ce, None);
    assert!((out.value - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn minority_pixels_carry_ninefold_weight() {
    let mut inst = instance(5, 2, 10, 10);
    inst.b = 1;
    inst.logits.truncate(2 * 100);
    inst.target = (0..100).map(|i| if i < 90 { 0 } else { 1 }).collect();
    let out = library_loss(&inst, LossKind::InvFreq, None);
    assert!((out.class_weights[1] / out.class_weights[0] - 9.0).abs() < 1e-12);
    assert!((out.class_weights[0] + out.class_weights[1] - 2.0).abs() < 1e-12);
    assert!(rel_err(out.value, oracle_loss(&inst, LossKind::InvFreq)) < 1e-12);
}

#[test]
fn hand_enumerated_recall_weights() {
    // Class 0: 4 labeled pixels, 2 predicted correctly; class 1: all 12 correct.
    let target: Vec<u8> = (0..16).map(|i| if i < 4 { 0 } else { 1 }).collect();
    let mut logits = vec![0.0; 2 * 16];
    for p in 0..16 {
        let predict_zero = p < 2;
        logits[p] = if predict_zero { 1.0 } else { -1.0 };
        logits[16 + p] = if predict_zero { -1.0 } else { 1.0 };
    }
    let inst = Instance { b: 1, c: 2, h: 4, w: 4, logits, target };
    let out = library_loss(&inst, LossKind::Recall, None);
    assert_eq!(out.class_weights, vec![0.5, 0.0]);
    let p_right = softmax(&[1.0, -1.0])[0];
    let p_wrong = softmax(&[-1.0, 1.0])[0];
    let want = 0.5 * -(2.0 * p_right.ln() + 2.0 * p_wrong.ln()) / 16.0;
    assert!(rel_err(out.value, want) < 1e-12);
}

#[test]
fn single_class_batch_reduces_to_cross_entropy() {
    let mut inst = instance(8, 3, 4, 4);
    inst.target.iter_mut().for_each(|t| *t = 2);
    let ce = library_loss(&inst, LossKind::Ce, None).value;
    assert!(rel_err(library_loss(&inst, LossKind::InvFreq, None).value, ce) < 1e-12);
}

#[test]
fn class_form_agrees_with_pixel_form() {
    for seed in 0..20 {
        let inst = instance(seed, 4, 5, 5);
        for kind in LossKind::ALL {
            assert!(rel_err(oracle_loss(&inst, kind), oracle_loss_by_class(&inst, kind)) < 1e-12);
        }
    }
}

fn kind_strategy() -> impl Strategy<Value = LossKind> {
    prop::sample::select(LossKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn library_matches_pixel_oracle(seed in any::<u64>(), c in 2usize..7, kind in kind_strategy()) {
        let inst = instance(seed, c, 6, 5);
        let got = library_loss(&inst, kind, None).value;
        prop_assert!(rel_err(got, oracle_loss(&inst, kind)) < 1e-10);
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), kind in kind_strategy()) {
        let inst = instance(seed, 4, 4, 4);
        prop_assert!(library_loss(&inst, kind, None).value >= 0.0);
    }

    #[test]
    fn pixel_order_does_not_matter(seed in any::<u64>(), kind in kind_strategy()) {
        let inst = instance(seed, 3, 4, 4);
        let mut perm: Vec<usize> = (0..inst.pixels()).collect();
        rng::shuffle(&mut rng::stream(seed, "perm", 0), &mut perm);
        let mut shuffled = inst.clone();
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.target[dst] = inst.target[src];
            for k in 0..inst.c {
                shuffled.logits[inst.index(dst, k)] = inst.logits[inst.index(src, k)];
            }
        }
        let a = library_loss(&inst, kind, None).value;
        let b = library_loss(&shuffled, kind, None).value;
        prop_assert!(rel_err(a, b) < 1e-12);
    }

    #[test]
    fn ignored_pixels_are_inert(seed in any::<u64>(), kind in kind_strategy(), bump in -50.0f64..50.0) {
        let inst = instance(seed, 3, 4, 4);
        let base = library_loss(&inst, kind, None);
        let mut moved = inst.clone();
        for n in 0..inst.pixels() {
            if inst.target[n] == IGNORE {
                for k in 0..inst.c {
                    moved.logits[inst.index(n, k)] += bump * (k as f64 + 1.0);
                }
            }
        }
        let after = library_loss(&moved, kind, None);
        prop_assert_eq!(base.value.to_bits(), after.value.to_bits());
        prop_assert_eq!(base.grad.data(), after.grad.data());
        for n in 0..inst.pixels() {
            if inst.target[n] == IGNORE {
                for k in 0..inst.c {
                    prop_assert_eq!(after.grad.data()[inst.index(n, k)], 0.0);
                }
            }
        }
    }
}
