use adaface_core::margin::margin_forward;
use adaface_core::{ce_grad, ce_loss, curricular_update_t, gst, softmax_probs, CosineBatch, MarginSpec, Variant};
use ndarray::Array2;
use proptest::prelude::*;

/// Straight-from-the-definition logit for the ground-truth class.
fn naive_positive(spec: &MarginSpec, c: f64, q: f64) -> f64 {
    let s = spec.s;
    let m = spec.m;
    let theta = c.acos();
    match spec.variant {
        Variant::Softmax => s * c,
        Variant::SphereFace => s * (m * theta).cos(),
        Variant::CosFace => s * (c - m),
        Variant::ArcFace | Variant::CurricularFace => s * (theta + m).cos(),
        Variant::AdaptiveAngular => {
            let margin = 0.1 + (q + 1.0) / 2.0 * 0.7;
            s * (theta + margin * m / 0.4).cos()
        }
        Variant::AdaFace => s * ((theta - m * q).cos() - (m * q + m)),
    }
}

fn naive_losses(spec: &MarginSpec, cos: &Array2<f64>, labels: &[usize], q: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let pos = naive_positive(spec, cos[[i, y]], q[i]);
        let logits: Vec<f64> = (0..cos.ncols())
            .map(|j| {
                let c = cos[[i, j]];
                if j == y {
                    pos
                } else if spec.variant == Variant::CurricularFace && pos < c {
                    spec.s * c * (spec.t + c)
                } else {
                    spec.s * c
                }
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        out.push(lse - pos);
    }
    out
}

#[derive(Debug, Clone)]
struct Case {
    cos: Array2<f64>,
    labels: Vec<usize>,
    quality: Vec<f64>,
    t: f64,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..6, 2usize..6).prop_flat_map(|(rows, classes)| {
        (
            prop::collection::vec(-0.999f64..0.999, rows * classes),
            prop::collection::vec(0..classes, rows),
            prop::collection::vec(-1.0f64..=1.0, rows),
            prop::collection::vec(-0.68f64..0.999, rows),
            0.0f64..=1.0,
        )
            .prop_map(move |(flat, labels, quality, pos, t)| {
                let mut cos = Array2::from_shape_vec((rows, classes), flat).unwrap();
                // keep SphereFace inside m·θ ≤ π
                for (i, &y) in labels.iter().enumerate() {
                    cos[[i, y]] = pos[i];
                }
                Case { cos, labels, quality, t }
            })
    })
}

fn spec_for(variant: Variant, t: f64) -> MarginSpec {
    let mut spec = MarginSpec::new(variant);
    spec.t = t;
    spec
}

fn batch(c: &Case) -> CosineBatch {
    CosineBatch::new(c.cos.clone(), c.labels.clone()).unwrap()
}

proptest! {
    #[test]
    fn loss_matches_naive_recomputation(c in case()) {
        for variant in Variant::ALL {
            let spec = spec_for(variant, c.t);
            let out = margin_forward(&spec, &batch(&c), Some(&c.quality)).unwrap();
            let naive = naive_losses(&spec, &c.cos, &c.labels, &c.quality);
            for (a, b) in out.losses.iter().zip(&naive) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{variant}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn probability_rows_are_distributions(c in case()) {
        for variant in Variant::ALL {
            let out = margin_forward(&spec_for(variant, c.t), &batch(&c), Some(&c.quality)).unwrap();
            for row in out.probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn zero_margin_is_normalized_softmax(c in case()) {
        let reference = margin_forward(&MarginSpec::new(Variant::Softmax), &batch(&c), None).unwrap();
        for variant in Variant::ALL {
            let m = if variant == Variant::SphereFace { 1.0 } else { 0.0 };
            let spec = spec_for(variant, c.t).with_margin(m);
            let out = margin_forward(&spec, &batch(&c), Some(&c.quality)).unwrap();
            let hard_negative = c.labels.iter().enumerate().any(|(i, &y)| {
                (0..c.cos.ncols()).any(|j| j != y && out.logits[[i, y]] < c.cos[[i, j]])
            });
            if variant == Variant::CurricularFace && hard_negative {
                continue;
            }
            for (a, b) in out.logits.iter().zip(&reference.logits) {
                prop_assert!((a - b).abs() < 1e-12, "{variant}");
            }
            prop_assert!((out.loss - reference.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_carry_no_margin(c in case()) {
        for variant in Variant::ALL {
            if variant == Variant::CurricularFace {
                continue;
            }
            let spec = spec_for(variant, c.t);
            let out = margin_forward(&spec, &batch(&c), Some(&c.quality)).unwrap();
            for (i, &y) in c.labels.iter().enumerate() {
                for j in (0..c.cos.ncols()).filter(|&j| j != y) {
                    prop_assert_eq!(out.logits[[i, j]], spec.s * c.cos[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn gst_factorizes_and_matches_gradient_prefactor(c in case()) {
        for variant in Variant::ALL {
            let spec = spec_for(variant, c.t);
            let out = margin_forward(&spec, &batch(&c), Some(&c.quality)).unwrap();
            let grad = ce_grad(&spec, &batch(&c), Some(&c.quality)).unwrap();
            for (i, &y) in c.labels.iter().enumerate() {
                let q = variant.uses_quality().then_some(c.quality[i]);
                let r = gst(&spec, c.cos[[i, y]], out.probs[[i, y]], q).unwrap();
                prop_assert_eq!(r.g, r.prob_term * r.deriv_term);
                prop_assert_eq!(r.g, grad.prefactor[[i, y]]);
                prop_assert!(r.prob_term <= 0.0);
            }
        }
    }

    #[test]
    fn softmax_matches_exp_sum_oracle(logits in prop::collection::vec(-30.0f64..30.0, 5)) {
        let p = softmax_probs(&logits).unwrap();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (pi, l) in p.iter().zip(&logits) {
            prop_assert!((pi - l.exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_two_class_loss_vanishes() {
    let b = CosineBatch::new(Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap(), vec![0]).unwrap();
    let loss = ce_loss(&MarginSpec::new(Variant::Softmax), &b, None).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn curricular_t_follows_increasing_positive_cosine() {
    let mut spec = MarginSpec::new(Variant::CurricularFace);
    let mut last = spec.t;
    for k in 0..1000 {
        let mean = -0.5 + 1.5 * k as f64 / 1000.0;
        let t = curricular_update_t(&mut spec, mean);
        assert!(t >= last, "step {k}: {t} < {last}");
        assert!((0.0..=1.0).contains(&t));
        last = t;
    }
    let mut spec = MarginSpec::new(Variant::CurricularFace);
    for _ in 0..5000 {
        curricular_update_t(&mut spec, 0.37);
    }
    assert!((spec.t - 0.37).abs() < 1e-12);
}
