use std::f64::consts::PI;

use adaface_core::gst_field::{
    compute_field, domain_theta_axis, export_field, parse_field, quality_axis, theta_axis, NegativeModel,
};
use adaface_core::{margin_logit, MarginSpec, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(P_y − 1)·∂f/∂cos θ` from a five-point difference of the margined logit,
/// with `P_y` from the two-class mirrored surrogate.
fn oracle(spec: &MarginSpec, theta: f64, q: f64) -> f64 {
    let quality = spec.variant.uses_quality().then_some(q);
    let f = |c: f64| margin_logit(spec, c, quality).unwrap();
    let c = theta.cos();
    let h = 1e-5;
    let deriv = (-f(c + 2.0 * h) + 8.0 * f(c + h) - 8.0 * f(c - h) + f(c - 2.0 * h)) / (12.0 * h);
    let pos = f(c);
    let cn = (PI - theta).cos();
    let neg = if spec.variant == Variant::CurricularFace && pos < cn {
        spec.s * cn * (spec.t + cn)
    } else {
        spec.s * cn
    };
    let p = 1.0 / (1.0 + (neg - pos).exp());
    (p - 1.0) * deriv
}

#[test]
fn pointwise_values_match_finite_differences() {
    let qs = quality_axis(21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in Variant::ALL {
        let spec = MarginSpec::new(variant);
        let thetas = domain_theta_axis(&spec, 61);
        let field = compute_field(&spec, &thetas, &qs, NegativeModel::Mirrored).unwrap();
        let mut checked = 0;
        while checked < 20 {
            let i = rng.random_range(0..thetas.len());
            let j = rng.random_range(0..qs.len());
            let theta = thetas[i];
            if theta < 0.05 || theta > PI - 0.05 || (variant == Variant::SphereFace && spec.m * theta > PI - 0.05) {
                continue;
            }
            let want = oracle(&spec, theta, qs[j]);
            let got = field.signed[[i, j]];
            let scale = want.abs().max(got.abs()).max(1e-300);
            assert!((got - want).abs() / scale < 1e-6, "{variant} θ={theta} q={}: {got} vs {want}", qs[j]);
            assert_eq!(field.values[[i, j]], got.abs());
            checked += 1;
        }
    }
}

#[test]
fn arcface_field_decays_towards_the_far_side() {
    let spec = MarginSpec::new(Variant::ArcFace);
    let thetas = theta_axis(181);
    let field = compute_field(&spec, &thetas, &[0.0], NegativeModel::Mirrored).unwrap();
    // past the boundary the signed term rises monotonically; its magnitude
    // shrinks until the derivative changes sign at θ = π − m
    let tail: Vec<(f64, f64, f64)> = thetas
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > PI / 2.0)
        .map(|(i, &t)| (t, field.signed[[i, 0]], field.values[[i, 0]]))
        .collect();
    for w in tail.windows(2) {
        assert!(w[1].1 > w[0].1, "signed g at θ={}", w[1].0);
        if w[1].0 < PI - spec.m {
            assert!(w[1].2 < w[0].2, "|g| at θ={}", w[1].0);
        }
    }
}

#[test]
fn high_quality_adaface_emphasizes_hard_samples() {
    let thetas = theta_axis(181);
    let field =
        compute_field(&MarginSpec::new(Variant::AdaFace), &thetas, &[-1.0, 1.0], NegativeModel::Mirrored).unwrap();
    for (i, &theta) in thetas.iter().enumerate() {
        if theta > 1.9 && theta < PI - 0.1 {
            assert!(field.values[[i, 1]] > field.values[[i, 0]], "θ={theta}");
        }
    }
}

#[test]
fn all_fields_are_finite_and_export_is_deterministic() {
    for variant in Variant::ALL {
        let spec = MarginSpec::new(variant);
        let field =
            compute_field(&spec, &domain_theta_axis(&spec, 181), &quality_axis(41), NegativeModel::Mirrored).unwrap();
        assert!(field.values.iter().all(|v| v.is_finite()));
        let mut a = Vec::new();
        let mut b = Vec::new();
        export_field(&field, &mut a).unwrap();
        export_field(&field, &mut b).unwrap();
        assert_eq!(a, b);
        let rows = parse_field(a.as_slice()).unwrap();
        assert_eq!(rows.len(), 181 * 41);
        assert_eq!(rows[42].2, field.values[[1, 1]]);
    }
}
