//! Finite-difference and reduction checks for the margin family.
//!
//! The suite compares analytic head gradients against central differences of
//! the loss, closed-form gradient scaling terms against differences of the
//! margin function, and the quality-adaptive margin against the fixed margins
//! it must collapse to.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::{BatchForward, HeadGrad, HeadState};
use crate::margin::{self, ce_loss, project_cos_grad, CosineBatch, GstReport, MarginSpec, Variant};
use crate::quality::{NormStats, ProxyChoice};

/// Central difference of `f` with respect to every entry of `at`.
pub fn numeric_gradient(at: &Array2<f64>, step: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = at.clone();
    let mut grad = Array2::zeros(at.dim());
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        *g = (up - down) / (2.0 * step);
    }
    grad
}

/// Normwise relative error `max|a − n| / max(max|a|, max|n|)`.
pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Source of the analytic quantities under test. The reference implementation
/// is [`Reference`]; tests substitute broken ones to confirm the suite notices.
pub trait AnalyticGradients {
    fn head_grad(&self, head: &HeadState, fwd: &BatchForward) -> Result<HeadGrad>;
    fn gst(&self, spec: &MarginSpec, cos_y: f64, p_y: f64, quality: Option<f64>) -> Result<GstReport>;
}

pub struct Reference;

impl AnalyticGradients for Reference {
    fn head_grad(&self, head: &HeadState, fwd: &BatchForward) -> Result<HeadGrad> {
        head.backward(fwd)
    }

    fn gst(&self, spec: &MarginSpec, cos_y: f64, p_y: f64, quality: Option<f64>) -> Result<GstReport> {
        margin::gst(spec, cos_y, p_y, quality)
    }
}

/// One random head-level test case.
#[derive(Debug, Clone)]
pub struct Instance {
    pub head: HeadState,
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub z_hat: Vec<f64>,
}

impl Instance {
    /// Mean loss at perturbed embeddings / weights, with `ẑ` frozen.
    pub fn loss_at(&self, embeddings: &Array2<f64>, weights: &Array2<f64>) -> f64 {
        let batch = CosineBatch::from_vectors(embeddings, weights, self.labels.clone()).expect("valid instance");
        let quality = self.head.spec.variant.uses_quality().then_some(self.z_hat.as_slice());
        ce_loss(&self.head.spec, &batch, quality).expect("valid instance")
    }

    /// Which CurricularFace negatives sit in the hard branch.
    fn branch_pattern(&self, embeddings: &Array2<f64>, weights: &Array2<f64>) -> Vec<bool> {
        if self.head.spec.variant != Variant::CurricularFace {
            return Vec::new();
        }
        let batch = CosineBatch::from_vectors(embeddings, weights, self.labels.clone()).expect("valid instance");
        let out = margin::margin_forward(&self.head.spec, &batch, None).expect("valid instance");
        let mut pattern = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            for j in 0..batch.num_classes() {
                pattern.push(j != y && out.logits[[i, y]] < batch.cos_theta[[i, j]]);
            }
        }
        pattern
    }
}

/// Draws a random instance whose ground-truth cosines spread over most of `(−1, 1)`.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    spec: MarginSpec,
    batch: usize,
    classes: usize,
    dim: usize,
) -> Instance {
    loop {
        let mut weights = Array2::from_shape_simple_fn((dim, classes), || rng.sample::<f64, _>(StandardNormal));
        for mut col in weights.columns_mut() {
            let scale = rng.random_range(0.5..2.0) / col.dot(&col).sqrt();
            col.mapv_inplace(|v| v * scale);
        }
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let mut embeddings = Array2::from_shape_simple_fn((batch, dim), || rng.sample::<f64, _>(StandardNormal));
        for (mut row, &y) in embeddings.axis_iter_mut(Axis(0)).zip(&labels) {
            let pull = rng.random_range(-2.0..6.0);
            let w = weights.column(y);
            let w_norm = w.dot(&w).sqrt();
            row.scaled_add(pull / w_norm, &w);
            let scale = rng.random_range(0.5..3.0);
            row.mapv_inplace(|v| v * scale);
        }
        let z_hat: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut spec = spec;
        if spec.variant == Variant::CurricularFace {
            spec.t = rng.random_range(0.0..1.0);
        }
        let head = HeadState::from_weights(weights, spec, ProxyChoice::FeatureNorm, NormStats::default())
            .expect("valid random head");
        let instance = Instance {
            head,
            embeddings,
            labels,
            z_hat,
        };
        // keep clear of the angular singularities and SphereFace's domain limit
        let fwd = instance
            .head
            .forward_with_quality(instance.embeddings.view(), &instance.labels, &instance.z_hat);
        if let Ok(fwd) = fwd {
            let pos = fwd.labels.iter().enumerate().map(|(i, &y)| fwd.cos_theta[[i, y]]);
            if pos.clone().all(|c| c.abs() < 0.999) {
                return instance;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadCheck {
    pub max_rel_error_embeddings: f64,
    pub max_rel_error_weights: f64,
    /// Coordinates skipped because a perturbation crossed a CurricularFace branch.
    pub skipped_coordinates: usize,
}

/// Compares analytic head gradients to central differences on one instance.
pub fn check_head_instance(instance: &Instance, analytic: &dyn AnalyticGradients, step: f64) -> Result<HeadCheck> {
    let head = &instance.head;
    let fwd = head.forward_with_quality(instance.embeddings.view(), &instance.labels, &instance.z_hat)?;
    let grad = analytic.head_grad(head, &fwd)?;
    let weights = head.weights().clone();
    let base_pattern = instance.branch_pattern(&instance.embeddings, &weights);

    let mut skipped = 0;
    let mut mask_z = Array2::from_elem(instance.embeddings.dim(), true);
    let mut mask_w = Array2::from_elem(weights.dim(), true);
    if !base_pattern.is_empty() {
        for (idx, keep) in mask_z.indexed_iter_mut() {
            for sign in [-1.0, 1.0] {
                let mut z = instance.embeddings.clone();
                z[idx] += sign * step;
                if instance.branch_pattern(&z, &weights) != base_pattern {
                    *keep = false;
                }
            }
        }
        for (idx, keep) in mask_w.indexed_iter_mut() {
            for sign in [-1.0, 1.0] {
                let mut w = weights.clone();
                w[idx] += sign * step;
                if instance.branch_pattern(&instance.embeddings, &w) != base_pattern {
                    *keep = false;
                }
            }
        }
        skipped = mask_z.iter().chain(mask_w.iter()).filter(|k| !**k).count();
    }

    let num_z = numeric_gradient(&instance.embeddings, step, |z| instance.loss_at(z, &weights));
    let num_w = numeric_gradient(&weights, step, |w| instance.loss_at(&instance.embeddings, w));
    let masked = |a: &Array2<f64>, mask: &Array2<bool>| {
        let mut out = a.clone();
        out.zip_mut_with(mask, |v, &keep| {
            if !keep {
                *v = 0.0
            }
        });
        out
    };
    Ok(HeadCheck {
        max_rel_error_embeddings: relative_error(&masked(&grad.d_embeddings, &mask_z), &masked(&num_z, &mask_z)),
        max_rel_error_weights: relative_error(&masked(&grad.d_weights, &mask_w), &masked(&num_w, &mask_w)),
        skipped_coordinates: skipped,
    })
}

/// Largest relative error between closed-form GST and `(P − 1)·∂f/∂cos θ`
/// taken by finite differences, over `points` random draws.
pub fn check_gst_closed_form<R: Rng>(
    rng: &mut R,
    variant: Variant,
    points: usize,
    step: f64,
    analytic: &dyn AnalyticGradients,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let mut spec = MarginSpec::new(variant);
        spec.m = match variant {
            Variant::SphereFace => rng.random_range(1.0..2.0),
            _ => rng.random_range(0.0..1.0),
        };
        if variant == Variant::CurricularFace {
            spec.t = rng.random_range(0.0..1.0);
        }
        let theta_max = match variant {
            Variant::SphereFace => std::f64::consts::PI / spec.m - 0.05,
            _ => std::f64::consts::PI - 0.05,
        };
        let theta = rng.random_range(0.05..theta_max);
        let p = rng.random_range(0.0..=1.0);
        let q = variant.uses_quality().then(|| rng.random_range(-1.0..=1.0));
        let c = theta.cos();
        let report = analytic.gst(&spec, c, p, q)?;
        let f = |x: f64| margin::margin_logit(&spec, x, q);
        // five-point stencil: the angular derivative has large higher
        // derivatives near θ → 0 that swamp a plain central difference
        let numeric = (p - 1.0) * (-f(c + 2.0 * step)? + 8.0 * f(c + step)? - 8.0 * f(c - step)? + f(c - 2.0 * step)?)
            / (12.0 * step);
        let scale = report.g.abs().max(numeric.abs());
        let err = if scale == 0.0 {
            0.0
        } else {
            (report.g - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `true` when `∂f/∂cos θ` of the angular margin is strictly monotone in
/// `cos θ` on `(−1 + ε, 1 − ε)`: increasing for `m > 0`, decreasing for `m < 0`.
pub fn angular_derivative_is_monotone(m: f64, points: usize, eps: f64) -> bool {
    let mut spec = MarginSpec::new(Variant::ArcFace);
    spec.m = m;
    let lo = -1.0 + eps;
    let hi = 1.0 - eps;
    let mut prev: Option<f64> = None;
    for k in 0..points {
        let c = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        let d = margin::gst(&spec, c, 0.0, None).expect("in domain").deriv_term;
        if let Some(p) = prev {
            let ok = if m > 0.0 { d > p } else { d < p };
            if !ok {
                return false;
            }
        }
        prev = Some(d);
    }
    true
}

/// Loss and cosine gradient for an arbitrary ground-truth logit function,
/// written independently of the margin module (plain softmax, no shared helpers).
pub fn naive_loss_and_grad(
    cos_theta: &Array2<f64>,
    labels: &[usize],
    s: f64,
    positive: impl Fn(f64) -> (f64, f64),
) -> (f64, Array2<f64>, Array2<f64>) {
    let (rows, classes) = cos_theta.dim();
    let mut logits = cos_theta.mapv(|c| s * c);
    let mut d_cos = Array2::zeros((rows, classes));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (fy, dfy) = positive(cos_theta[[i, y]]);
        logits[[i, y]] = fy;
        let max = logits.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.row(i).iter().map(|l| (l - max).exp()).sum();
        total += -(fy - max - denom.ln());
        for j in 0..classes {
            let p = (logits[[i, j]] - max).exp() / denom;
            d_cos[[i, j]] = if j == y { (p - 1.0) * dfy } else { p * s } / rows as f64;
        }
    }
    (total / rows as f64, logits, d_cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionCheck {
    pub z_hat: f64,
    pub max_logit_diff: f64,
    pub max_loss_diff: f64,
    pub max_grad_diff: f64,
}

/// Forces `ẑ ∈ {−1, 0, +1}` on AdaFace and compares against ArcFace, CosFace
/// and the shifted negative angular margin respectively.
pub fn check_reductions<R: Rng>(rng: &mut R, m: f64, batches: usize) -> Result<Vec<ReductionCheck>> {
    let mut out = Vec::new();
    for z in [-1.0, 0.0, 1.0] {
        let mut check = ReductionCheck {
            z_hat: z,
            max_logit_diff: 0.0,
            max_loss_diff: 0.0,
            max_grad_diff: 0.0,
        };
        for _ in 0..batches {
            let ada_spec = MarginSpec::new(Variant::AdaFace).with_margin(m);
            let inst = random_instance(rng, ada_spec, 8, 10, 16);
            let z_hat = vec![z; inst.labels.len()];
            let ada = inst.head.forward_with_quality(inst.embeddings.view(), &inst.labels, &z_hat)?;
            let ada_grad = inst.head.backward(&ada)?;
            let (loss, logits, dz, dw) = if z == 1.0 {
                let s = ada_spec.s;
                let batch = CosineBatch::from_vectors(&inst.embeddings, inst.head.weights(), inst.labels.clone())?;
                let (loss, logits, d_cos) = naive_loss_and_grad(&batch.cos_theta, &inst.labels, s, |c| {
                    let theta = c.acos();
                    let value = s * ((theta - m).cos() - 2.0 * m);
                    let deriv = s * (m.cos() - c * m.sin() / (1.0 - c * c).sqrt());
                    (value, deriv)
                });
                let geometry = batch.geometry.as_ref().expect("built from vectors");
                let (dz, dw) = project_cos_grad(&d_cos, &batch.cos_theta, geometry);
                (loss, logits, dz, dw)
            } else {
                let variant = if z == -1.0 { Variant::ArcFace } else { Variant::CosFace };
                let fixed = HeadState::from_weights(
                    inst.head.weights().clone(),
                    MarginSpec::new(variant).with_margin(m),
                    ProxyChoice::FeatureNorm,
                    NormStats::default(),
                )?;
                let fwd = fixed.forward_with_quality(inst.embeddings.view(), &inst.labels, &z_hat)?;
                let g = fixed.backward(&fwd)?;
                (fwd.loss, fwd.logits, g.d_embeddings, g.d_weights)
            };
            check.max_logit_diff = check.max_logit_diff.max(max_abs_diff(&ada.logits, &logits));
            check.max_loss_diff = check.max_loss_diff.max((ada.loss - loss).abs());
            check.max_grad_diff = check
                .max_grad_diff
                .max(max_abs_diff(&ada_grad.d_embeddings, &dz))
                .max(max_abs_diff(&ada_grad.d_weights, &dw));
        }
        out.push(check);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub batch: usize,
    pub classes: usize,
    pub dim: usize,
    pub step: f64,
    pub grad_tolerance: f64,
    pub gst_points: usize,
    pub gst_step: f64,
    pub gst_tolerance: f64,
    pub reduction_batches: usize,
    pub reduction_tolerance: f64,
    pub monotone_points: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            batch: 8,
            classes: 10,
            dim: 16,
            step: 1e-5,
            grad_tolerance: 1e-5,
            gst_points: 1000,
            gst_step: 1e-5,
            gst_tolerance: 1e-6,
            reduction_batches: 50,
            reduction_tolerance: 1e-12,
            monotone_points: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub max_rel_error_embeddings: f64,
    pub max_rel_error_weights: f64,
    pub max_rel_error_gst: f64,
    pub skipped_coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub m: f64,
    pub monotone: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub variants: Vec<VariantReport>,
    pub reductions: Vec<ReductionCheck>,
    pub reductions_passed: bool,
    pub monotonicity: Vec<MonotoneReport>,
    pub passed: bool,
}

pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    run_gradcheck_with(options, &Reference)
}

pub fn run_gradcheck_with(options: &GradcheckOptions, analytic: &dyn AnalyticGradients) -> Result<GradcheckReport> {
    let mut variants = Vec::new();
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(k as u64));
        let mut report = VariantReport {
            variant,
            max_rel_error_embeddings: 0.0,
            max_rel_error_weights: 0.0,
            max_rel_error_gst: 0.0,
            skipped_coordinates: 0,
            passed: false,
        };
        for _ in 0..options.instances {
            let inst = random_instance(&mut rng, MarginSpec::new(variant), options.batch, options.classes, options.dim);
            let check = check_head_instance(&inst, analytic, options.step)?;
            report.max_rel_error_embeddings = report.max_rel_error_embeddings.max(check.max_rel_error_embeddings);
            report.max_rel_error_weights = report.max_rel_error_weights.max(check.max_rel_error_weights);
            report.skipped_coordinates += check.skipped_coordinates;
        }
        report.max_rel_error_gst = check_gst_closed_form(&mut rng, variant, options.gst_points, options.gst_step, analytic)?;
        report.passed = report.max_rel_error_embeddings < options.grad_tolerance
            && report.max_rel_error_weights < options.grad_tolerance
            && report.max_rel_error_gst < options.gst_tolerance;
        variants.push(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let reductions = check_reductions(&mut rng, 0.4, options.reduction_batches)?;
    let reductions_passed = reductions.iter().all(|r| {
        r.max_logit_diff <= options.reduction_tolerance
            && r.max_loss_diff <= options.reduction_tolerance
            && r.max_grad_diff <= options.reduction_tolerance
    });
    let monotonicity: Vec<MonotoneReport> = [0.2, -0.2, 0.4, -0.4]
        .into_iter()
        .map(|m| MonotoneReport {
            m,
            monotone: angular_derivative_is_monotone(m, options.monotone_points, 1e-3),
        })
        .collect();
    let passed = variants.iter().all(|v| v.passed) && reductions_passed && monotonicity.iter().all(|m| m.monotone);
    Ok(GradcheckReport {
        options: options.clone(),
        variants,
        reductions,
        reductions_passed,
        monotonicity,
        passed,
    })
}
