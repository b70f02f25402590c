use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Sample;
use crate::prototypes::ClassPrototype;

/// Images are single-pixel tensors holding the class id.
fn toy_dataset(seen: usize, unseen: usize, per_class: usize) -> ZslDataset {
    let classes = (0..seen + unseen)
        .map(|c| ClassPrototype {
            class_id: c,
            z: vec![c as f64, 1.0],
            seen: c < seen,
        })
        .collect();
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for c in 0..seen + unseen {
        let split = if c < seen { Split::TestSeen } else { Split::TestUnseen };
        for i in 0..per_class {
            samples.push(Sample {
                image_file: format!("images/{c}_{i}.zvt"),
                class_id: c,
                split,
            });
            images.push(Tensor::full(&[1, 1, 1], c as f64));
        }
    }
    ZslDataset {
        prototypes: PrototypeTable::new(classes).unwrap(),
        samples,
        images,
        channels: 1,
        image_size: 1,
        spec: None,
    }
}

struct Oracle;

impl Scorer for Oracle {
    fn scores(&self, images: &[&Tensor], _: &PrototypeTable, candidates: &[ClassId]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|img| {
                let label = img.data()[0] as usize;
                candidates.iter().map(|&c| if c == label { 1.0 } else { 0.0 }).collect()
            })
            .collect())
    }
}

/// Uniform random probability vectors, fixed per seed.
struct Random(u64);

impl Scorer for Random {
    fn scores(&self, images: &[&Tensor], _: &PrototypeTable, candidates: &[ClassId]) -> Result<Vec<Vec<f64>>> {
        let mut r = ChaCha8Rng::seed_from_u64(self.0);
        Ok(images
            .iter()
            .map(|_| {
                let raw: Vec<f64> = candidates.iter().map(|_| r.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect())
    }
}

#[test]
fn harmonic_mean_reproduces_reported_values() {
    assert!((harmonic_mean(66.1, 84.6) - 74.2).abs() <= 0.1);
    assert!((harmonic_mean(69.4, 78.2) - 73.6).abs() <= 0.1);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    assert_eq!(harmonic_mean(0.5, 0.5), 0.5);
}

#[test]
fn scores_examples() {
    let one = Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap();
    assert_eq!(class_scores(&[0.4, 7.0], &one).unwrap(), vec![1.0]);
    let same = Tensor::matrix(3, 2, vec![0.2, 0.3, 0.2, 0.3, 0.2, 0.3]).unwrap();
    for s in class_scores(&[5.0, -2.0], &same).unwrap() {
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(matches!(class_scores(&[1.0], &one), Err(Error::Dimension { .. })));
}

#[test]
fn scores_match_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let phi = Tensor::uniform(&[6], -2.0, 2.0, &mut r);
        let z = Tensor::uniform(&[7, 6], 0.0, 1.0, &mut r);
        let got = class_scores(phi.data(), &z).unwrap();
        let mut logits = Vec::new();
        for c in 0..7 {
            let mut dot = 0.0;
            for a in 0..6 {
                dot += phi.data()[a] * z.data()[c * 6 + a];
            }
            logits.push(dot);
        }
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for (g, l) in got.iter().zip(&logits) {
            assert!((g - l.exp() / denom).abs() < 1e-12);
        }
    }
}

#[test]
fn calibration_examples() {
    let ids = [0, 1];
    let unseen = [false, true];
    assert_eq!(predict(&[0.6, 0.3], &ids, &unseen, 0.0), 0);
    assert_eq!(predict(&[0.6, 0.3], &ids, &unseen, 0.4), 1);
    assert_eq!(predict(&[0.5, 0.5], &[4, 2], &[false, false], 0.0), 2);
    let all_unseen = [true, true, true];
    for tau in [0.0, 0.4, 10.0] {
        assert_eq!(predict(&[0.2, 0.5, 0.3], &[5, 6, 7], &all_unseen, tau), 6);
    }
}

#[test]
fn oracle_scores_perfectly() {
    let ds = toy_dataset(3, 2, 4);
    let c = evaluate(&Oracle, &ds, EvalMode::Czsl, DEFAULT_TAU).unwrap();
    assert_eq!(c.acc, Some(1.0));
    let g = evaluate(&Oracle, &ds, EvalMode::Gzsl, 0.0).unwrap();
    assert_eq!((g.u, g.s, g.h), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!(g.per_class.len(), 5);
}

#[test]
fn random_scorer_is_at_chance() {
    let ds = toy_dataset(1, 5, 200);
    let r = evaluate(&Random(11), &ds, EvalMode::Czsl, 0.0).unwrap();
    let acc = r.acc.unwrap();
    assert!((acc - 0.2).abs() <= 0.03, "acc {acc}");
}

#[test]
fn czsl_ignores_tau() {
    let ds = toy_dataset(3, 4, 25);
    let base = evaluate(&Random(2), &ds, EvalMode::Czsl, 0.0).unwrap();
    for tau in [0.4, 10.0] {
        let r = evaluate(&Random(2), &ds, EvalMode::Czsl, tau).unwrap();
        assert_eq!(r.acc, base.acc);
        assert_eq!(r.confusion, base.confusion);
    }
}

#[test]
fn duplicating_a_class_leaves_means_unchanged() {
    let ds = toy_dataset(2, 2, 3);
    let mut dup = ds.clone();
    for i in ds.indices(Split::TestUnseen).into_iter().filter(|&i| ds.samples[i].class_id == 3) {
        dup.samples.push(ds.samples[i].clone());
        dup.images.push(ds.images[i].clone());
    }
    // Scores depend only on the image, so duplicates score identically.
    struct ByValue;
    impl Scorer for ByValue {
        fn scores(&self, images: &[&Tensor], _: &PrototypeTable, c: &[ClassId]) -> Result<Vec<Vec<f64>>> {
            Ok(images
                .iter()
                .map(|img| {
                    let v = img.data()[0];
                    c.iter().map(|&k| 1.0 / (1.0 + (k as f64 - v - 0.6).abs())).collect()
                })
                .collect())
        }
    }
    let a = evaluate(&ByValue, &ds, EvalMode::Gzsl, 0.1).unwrap();
    let b = evaluate(&ByValue, &dup, EvalMode::Gzsl, 0.1).unwrap();
    assert_eq!((a.u, a.s), (b.u, b.s));
    assert_ne!(a.per_sample_acc, b.per_sample_acc);
}

#[test]
fn empty_split_is_rejected() {
    let mut ds = toy_dataset(2, 2, 3);
    let keep: Vec<usize> = ds.indices(Split::TestSeen);
    ds.samples = keep.iter().map(|&i| ds.samples[i].clone()).collect();
    ds.images = keep.iter().map(|&i| ds.images[i].clone()).collect();
    assert!(matches!(evaluate(&Oracle, &ds, EvalMode::Czsl, 0.0), Err(Error::Contract(_))));
    assert!(matches!(evaluate(&Oracle, &ds, EvalMode::Gzsl, 0.0), Err(Error::Contract(_))));
    assert!(matches!(evaluate(&Oracle, &toy_dataset(1, 1, 1), EvalMode::Czsl, -1.0), Err(Error::Config { .. })));
}

#[test]
fn report_text_layout() {
    let ds = toy_dataset(2, 2, 2);
    let mut r = evaluate(&Oracle, &ds, EvalMode::Gzsl, 0.4).unwrap();
    r.seed = Some(7);
    r.config_hash = Some("abc".into());
    let text = r.to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(&lines[..4], &["mode\tgzsl", "tau\t0.4", "seed\t7", "config\tabc"]);
    assert_eq!(*lines.last().unwrap(), "acc=- | U=100.00 S=100.00 H=100.00");
    assert!(text.contains("2\tunseen\t2\t2\t1.0000"));
    let c = evaluate(&Oracle, &ds, EvalMode::Czsl, 0.4).unwrap();
    assert_eq!(c.summary(), "acc=100.00 | U=- S=- H=-");
}

proptest! {
    #[test]
    fn harmonic_mean_properties(u in 0.0f64..1.0, s in 0.0f64..1.0) {
        let h = harmonic_mean(u, s);
        prop_assert_eq!(h, harmonic_mean(s, u));
        prop_assert!(h <= 2.0 * u.min(s) + 1e-12);
        prop_assert!(h <= u.max(s) + 1e-12);
        prop_assert!((harmonic_mean(u, u) - u).abs() < 1e-12);
    }

    #[test]
    fn tau_is_monotone(seed in 0u64..50) {
        let ds = toy_dataset(3, 3, 10);
        let set = score(&Random(seed), &ds, EvalMode::Gzsl).unwrap();
        let mut prev = report(&set, 0.0);
        for k in 1..=10 {
            let r = report(&set, k as f64 / 10.0);
            prop_assert!(r.u.unwrap() >= prev.u.unwrap());
            prop_assert!(r.s.unwrap() <= prev.s.unwrap());
            prev = r;
        }
    }
}
