use adaface_core::synth::{augment, compose, generate, random_unit, SynthConfig, SynthDataset, SynthSample};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(dim: usize, q: f64, seed: u64) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SynthSample {
        input: random_unit(&mut rng, dim),
        label: 0,
        true_quality: q,
        identifiable: true,
        augmented: false,
    }
}

#[test]
fn augmented_fraction_matches_three_independent_transforms() {
    for p in [0.05, 0.2, 0.5] {
        let cfg = SynthConfig {
            augment_probability: p,
            ..SynthConfig::default()
        };
        let base = sample(64, 0.9, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let hits = (0..n).filter(|_| augment(&base, &cfg, &mut rng).augmented).count() as f64;
        let expected = 1.0 - (1.0 - p).powi(3);
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        let observed = hits / n as f64;
        assert!((observed - expected).abs() <= 3.0 * sigma, "p={p}: {observed} vs {expected}");
    }
}

#[test]
fn unidentifiable_samples_sit_at_chance() {
    let cfg = SynthConfig {
        num_identities: 20,
        samples_per_identity: 100,
        ambient_dim: 32,
        identity_rank: 8,
        unidentifiable_fraction: 0.5,
        num_unenrolled: 2,
        seed: 5,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let nearest = |s: &SynthSample| {
        (0..cfg.num_identities)
            .max_by(|&a, &b| {
                let da: f64 = ds.prototypes.row(a).iter().zip(&s.input).map(|(x, y)| x * y).sum();
                let db: f64 = ds.prototypes.row(b).iter().zip(&s.input).map(|(x, y)| x * y).sum();
                da.total_cmp(&db)
            })
            .unwrap()
    };
    let lost: Vec<&SynthSample> = ds.train.iter().filter(|s| !s.identifiable).collect();
    let n = lost.len() as f64;
    let acc = lost.iter().filter(|s| nearest(s) == s.label).count() as f64 / n;
    let chance = 1.0 / cfg.num_identities as f64;
    let sigma = (chance * (1.0 - chance) / n).sqrt();
    assert!((acc - chance).abs() <= 3.0 * sigma, "accuracy {acc} over {n} samples");
    for s in &lost {
        assert_eq!(s.true_quality, 0.0);
    }

    let clean: Vec<&SynthSample> = ds.train.iter().filter(|s| s.identifiable && s.true_quality > 0.8).collect();
    let clean_acc = clean.iter().filter(|s| nearest(s) == s.label).count() as f64 / clean.len() as f64;
    assert!(clean_acc > 0.95, "{clean_acc}");
}

#[test]
fn test_split_shapes() {
    let cfg = SynthConfig {
        num_identities: 12,
        samples_per_identity: 10,
        ambient_dim: 16,
        identity_rank: 4,
        num_unenrolled: 3,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    assert_eq!(ds.train.len(), 120);
    assert_eq!(ds.gallery.len(), 12 * cfg.gallery_per_identity);
    assert_eq!(ds.probes.len(), 12 * cfg.probes_per_identity);
    assert_eq!(ds.unenrolled.len(), 3 * cfg.unenrolled_probes_per_identity);
    assert!(ds.gallery.iter().all(|s| s.true_quality >= cfg.gallery_quality_min));
    assert!(ds.unenrolled.iter().all(|s| s.label >= cfg.num_identities));
    assert_eq!(SynthDataset::stack(&ds.train).dim(), (120, 16));
    for row in ds.prototypes.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn prototype_cosine_rises_with_quality(seed in any::<u64>(), noise_scale in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proto = random_unit(&mut rng, 24);
        let noise = random_unit(&mut rng, 24);
        let mut last = f64::NEG_INFINITY;
        for k in 0..=50 {
            let q = k as f64 / 50.0;
            let x = compose(&proto, &noise, q, noise_scale);
            let c: f64 = x.iter().zip(&proto).map(|(a, b)| a * b).sum();
            prop_assert!(c > last - 1e-12, "q={q}: {c} after {last}");
            last = c;
        }
        prop_assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn augmentation_never_raises_quality(seed in any::<u64>(), q in 0.0f64..=1.0, p in 0.0f64..=1.0) {
        let cfg = SynthConfig { augment_probability: p, ..SynthConfig::default() };
        let base = sample(32, q, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let out = augment(&base, &cfg, &mut rng);
        prop_assert!(out.true_quality <= q);
        prop_assert!(out.true_quality >= 0.0);
        prop_assert_eq!(out.label, base.label);
        if !out.augmented {
            prop_assert_eq!(&out, &base);
        }
    }

    #[test]
    fn zero_probability_is_identity(seed in any::<u64>(), q in 0.0f64..=1.0) {
        let cfg = SynthConfig { augment_probability: 0.0, ..SynthConfig::default() };
        let base = sample(16, q, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(augment(&base, &cfg, &mut rng), base);
    }
}
