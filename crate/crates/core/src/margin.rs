//! Margin functions for the cosine-softmax family and their gradients.
//!
//! Every variant shares one structure: a per-class logit `f(cos θ_j)`, a softmax
//! over those logits and the cross-entropy of the ground-truth class. Variants
//! differ only in how the ground-truth logit is margined (and, for
//! CurricularFace, in how hard negatives are re-weighted), so each one reduces to
//! a pair of scalar functions returning `(value, ∂value/∂cos θ)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosines may leave `[-1, 1]` by rounding; anything further out is a caller bug.
pub const COS_TOLERANCE: f64 = 1e-9;

/// Below this value of `1 - cos²θ` the `sin θ` denominator is clamped.
pub const SINGULAR_GAP: f64 = 1e-8;
/// Replacement for `sin θ` inside the singular band.
pub const SINGULAR_DENOM: f64 = 1e-4;

pub const DEFAULT_SCALE: f64 = 64.0;
pub const DEFAULT_T_MOMENTUM: f64 = 0.99;

/// MagFace-style margin range, as multiples of `m` (gives `[0.1, 0.8]` at `m = 0.4`).
pub const ADAPTIVE_RANGE: (f64, f64) = (0.25, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Softmax,
    SphereFace,
    CosFace,
    ArcFace,
    CurricularFace,
    AdaptiveAngular,
    AdaFace,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Softmax,
        Variant::SphereFace,
        Variant::CosFace,
        Variant::ArcFace,
        Variant::CurricularFace,
        Variant::AdaptiveAngular,
        Variant::AdaFace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::SphereFace => "sphereface",
            Variant::CosFace => "cosface",
            Variant::ArcFace => "arcface",
            Variant::CurricularFace => "curricularface",
            Variant::AdaptiveAngular => "adaptive-angular",
            Variant::AdaFace => "adaface",
        }
    }

    /// Whether the ground-truth logit depends on a per-sample quality value.
    pub fn uses_quality(self) -> bool {
        matches!(self, Variant::AdaptiveAngular | Variant::AdaFace)
    }

    /// Margin used when none is configured explicitly.
    pub fn default_margin(self) -> f64 {
        match self {
            Variant::Softmax => 0.0,
            Variant::SphereFace => 1.35,
            Variant::CosFace => 0.35,
            Variant::ArcFace | Variant::CurricularFace => 0.5,
            Variant::AdaptiveAngular | Variant::AdaFace => 0.4,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key || (key == "adaptiveangular" && *v == Variant::AdaptiveAngular))
            .ok_or_else(|| Error::Config(format!("unknown margin variant `{s}`")))
    }
}

/// A loss variant together with its hyperparameters.
///
/// `t` is the CurricularFace progression state; other variants ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub variant: Variant,
    pub m: f64,
    pub s: f64,
    pub t: f64,
    pub t_momentum: f64,
}

impl MarginSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            m: variant.default_margin(),
            s: DEFAULT_SCALE,
            t: 0.0,
            t_momentum: DEFAULT_T_MOMENTUM,
        }
    }

    pub fn with_margin(mut self, m: f64) -> Self {
        self.m = m;
        self
    }

    pub fn with_scale(mut self, s: f64) -> Self {
        self.s = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::Domain { what: "s", value: self.s });
        }
        if !(self.m.is_finite() && self.m >= 0.0) {
            return Err(Error::Domain { what: "m", value: self.m });
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Domain { what: "t", value: self.t });
        }
        if !(0.0..1.0).contains(&self.t_momentum) {
            return Err(Error::Domain {
                what: "t_momentum",
                value: self.t_momentum,
            });
        }
        Ok(())
    }

    /// Angular margin applied by the adaptive-angular variant for quality `z_hat`.
    pub fn adaptive_margin(&self, z_hat: f64) -> f64 {
        let (lo, hi) = ADAPTIVE_RANGE;
        self.m * (lo + 0.5 * (z_hat + 1.0) * (hi - lo))
    }

    /// `(g_angle, g_add)` of the quality-adaptive margin.
    pub fn adaface_terms(&self, z_hat: f64) -> (f64, f64) {
        (-self.m * z_hat, self.m * z_hat + self.m)
    }

    fn quality(&self, quality: Option<f64>) -> Result<f64> {
        let q = quality.ok_or(Error::MissingQuality(self.variant))?;
        if !q.is_finite() || q.abs() > 1.0 + COS_TOLERANCE {
            return Err(Error::Domain { what: "quality", value: q });
        }
        Ok(q.clamp(-1.0, 1.0))
    }

    /// Ground-truth logit and its derivative with respect to `cos θ_y`.
    pub(crate) fn positive(&self, cos_y: f64, quality: Option<f64>) -> Result<(f64, f64)> {
        let c = check_cos(cos_y)?;
        let s = self.s;
        Ok(match self.variant {
            Variant::Softmax => (s * c, s),
            Variant::CosFace => (s * (c - self.m), s),
            Variant::ArcFace | Variant::CurricularFace => angular(s, c, self.m),
            Variant::AdaptiveAngular => angular(s, c, self.adaptive_margin(self.quality(quality)?)),
            Variant::AdaFace => {
                let (g_angle, g_add) = self.adaface_terms(self.quality(quality)?);
                let (value, deriv) = angular(s, c, g_angle);
                (value - s * g_add, deriv)
            }
            Variant::SphereFace => {
                let theta = c.acos();
                if self.m * theta > std::f64::consts::PI + 1e-12 {
                    return Err(Error::Domain {
                        what: "m·θ (SphereFace)",
                        value: self.m * theta,
                    });
                }
                let value = s * (self.m * theta).cos();
                let deriv = s * self.m * (self.m * theta).sin() / sin_denominator(c);
                (value, deriv)
            }
        })
    }

    /// Negative-class logit and its derivative with respect to `cos θ_j`.
    pub(crate) fn negative(&self, cos_j: f64, positive_logit: f64) -> Result<(f64, f64)> {
        let c = check_cos(cos_j)?;
        let s = self.s;
        if self.variant == Variant::CurricularFace && positive_logit < c {
            Ok((s * c * (self.t + c), s * (self.t + 2.0 * c)))
        } else {
            Ok((s * c, s))
        }
    }
}

fn check_cos(c: f64) -> Result<f64> {
    if !c.is_finite() || c.abs() > 1.0 + COS_TOLERANCE {
        return Err(Error::Domain { what: "cos θ", value: c });
    }
    Ok(c.clamp(-1.0, 1.0))
}

fn sin_denominator(c: f64) -> f64 {
    let gap = 1.0 - c * c;
    if gap < SINGULAR_GAP {
        SINGULAR_DENOM
    } else {
        gap.sqrt()
    }
}

/// `s·cos(θ + g)` written in terms of `c = cos θ`, and its derivative in `c`.
fn angular(s: f64, c: f64, g: f64) -> (f64, f64) {
    let sin_theta = (1.0 - c * c).max(0.0).sqrt();
    let (sin_g, cos_g) = g.sin_cos();
    let value = s * (c * cos_g - sin_theta * sin_g);
    let deriv = s * (cos_g + c * sin_g / sin_denominator(c));
    (value, deriv)
}

/// The margined ground-truth logit `f(θ_y)`.
pub fn margin_logit(spec: &MarginSpec, cos_theta_y: f64, quality: Option<f64>) -> Result<f64> {
    spec.positive(cos_theta_y, quality).map(|(v, _)| v)
}

/// Logit of a non-ground-truth class given the already margined positive logit.
pub fn negative_logit(spec: &MarginSpec, cos_theta_j: f64, positive_logit: f64) -> Result<f64> {
    spec.negative(cos_theta_j, positive_logit).map(|(v, _)| v)
}

/// Numerically stable softmax of one logit row.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Unit vectors and norms behind a cosine matrix; needed to map cosine
/// gradients back onto embeddings and class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// `batch × d`, rows unit length.
    pub unit_embeddings: Array2<f64>,
    pub embedding_norms: Vec<f64>,
    /// `d × C`, columns unit length.
    pub unit_weights: Array2<f64>,
    pub weight_norms: Vec<f64>,
}

/// Cosines between samples and class weights, with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineBatch {
    pub cos_theta: Array2<f64>,
    pub labels: Vec<usize>,
    pub geometry: Option<Geometry>,
}

impl CosineBatch {
    pub fn new(cos_theta: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (rows, classes) = cos_theta.dim();
        if rows == 0 {
            return Err(Error::Empty("batch"));
        }
        if labels.len() != rows {
            return Err(Error::shape("labels", rows, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Domain {
                what: "label",
                value: bad as f64,
            });
        }
        if let Some(&bad) = cos_theta.iter().find(|c| !c.is_finite() || c.abs() > 1.0 + COS_TOLERANCE) {
            return Err(Error::Domain { what: "cos θ", value: bad });
        }
        Ok(Self {
            cos_theta,
            labels,
            geometry: None,
        })
    }

    /// Builds the batch from raw embeddings (`batch × d`) and weights (`d × C`).
    pub fn from_vectors(
        embeddings: &Array2<f64>,
        weights: &Array2<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if embeddings.ncols() != weights.nrows() {
            return Err(Error::shape("embedding dim", weights.nrows(), embeddings.ncols()));
        }
        let (unit_embeddings, embedding_norms) = normalize_rows(embeddings)?;
        let (unit_weights_t, weight_norms) = normalize_rows(&weights.t().to_owned())?;
        let unit_weights = unit_weights_t.reversed_axes();
        let mut cos_theta = unit_embeddings.dot(&unit_weights);
        cos_theta.mapv_inplace(|c| c.clamp(-1.0, 1.0));
        let mut batch = Self::new(cos_theta, labels)?;
        batch.geometry = Some(Geometry {
            unit_embeddings,
            embedding_norms,
            unit_weights,
            weight_norms,
        });
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.cos_theta.ncols()
    }

    pub fn positive_cosines(&self) -> Vec<f64> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.cos_theta[[i, y]])
            .collect()
    }
}

/// Row-normalizes `m`, returning the unit rows and the original norms.
pub fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("vector norm"));
        }
        if norm == 0.0 {
            return Err(Error::ZeroNorm(i));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((unit, norms))
}

/// Per-class logits, probabilities and losses of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginOutput {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// `∂f/∂cos θ_j` for every entry.
    pub logit_derivs: Array2<f64>,
    pub losses: Vec<f64>,
    pub loss: f64,
}

fn quality_of(spec: &MarginSpec, quality: Option<&[f64]>, rows: usize, i: usize) -> Result<Option<f64>> {
    if !spec.variant.uses_quality() {
        return Ok(None);
    }
    let q = quality.ok_or(Error::MissingQuality(spec.variant))?;
    if q.len() != rows {
        return Err(Error::shape("quality", rows, q.len()));
    }
    Ok(Some(q[i]))
}

/// Evaluates logits, probabilities and per-sample losses for a batch.
pub fn margin_forward(spec: &MarginSpec, batch: &CosineBatch, quality: Option<&[f64]>) -> Result<MarginOutput> {
    let (rows, classes) = batch.cos_theta.dim();
    let mut logits = Array2::zeros((rows, classes));
    let mut derivs = Array2::zeros((rows, classes));
    let mut probs = Array2::zeros((rows, classes));
    let mut losses = Vec::with_capacity(rows);
    for (i, &y) in batch.labels.iter().enumerate() {
        let q = quality_of(spec, quality, rows, i)?;
        let (pos, pos_deriv) = spec.positive(batch.cos_theta[[i, y]], q)?;
        for j in 0..classes {
            let (value, deriv) = if j == y {
                (pos, pos_deriv)
            } else {
                spec.negative(batch.cos_theta[[i, j]], pos)?
            };
            logits[[i, j]] = value;
            derivs[[i, j]] = deriv;
        }
        let row = logits.row(i).to_vec();
        let p = softmax_probs(&row)?;
        probs.row_mut(i).iter_mut().zip(&p).for_each(|(dst, &v)| *dst = v);
        losses.push(log_sum_exp(&row) - pos);
    }
    let loss = losses.iter().sum::<f64>() / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(MarginOutput {
        logits,
        probs,
        logit_derivs: derivs,
        losses,
        loss,
    })
}

/// Mean cross-entropy of the batch under `spec`.
pub fn ce_loss(spec: &MarginSpec, batch: &CosineBatch, quality: Option<&[f64]>) -> Result<f64> {
    margin_forward(spec, batch, quality).map(|out| out.loss)
}

/// Analytic gradients of the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CeGrad {
    pub loss: f64,
    /// Per-sample `∂L_i/∂cos θ_ij = (P_j − 1[j = y]) · ∂f/∂cos θ_j`; the
    /// ground-truth entry is the gradient scaling term of that sample.
    pub prefactor: Array2<f64>,
    /// Gradient of the batch mean with respect to the cosine matrix.
    pub d_cos: Array2<f64>,
    /// `batch × d`, present when the batch carries geometry.
    pub d_embeddings: Option<Array2<f64>>,
    /// `d × C`, present when the batch carries geometry.
    pub d_weights: Option<Array2<f64>>,
}

/// `(P − onehot) ∘ ∂f/∂cos θ` for every sample and class.
pub fn gradient_prefactor(output: &MarginOutput, labels: &[usize]) -> Array2<f64> {
    let mut pre = output.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        pre[[i, y]] -= 1.0;
    }
    pre * &output.logit_derivs
}

/// Maps a cosine-matrix gradient onto raw embeddings and raw class weights,
/// including the Jacobian of the unit normalization on both sides.
pub fn project_cos_grad(
    d_cos: &Array2<f64>,
    cos_theta: &Array2<f64>,
    geometry: &Geometry,
) -> (Array2<f64>, Array2<f64>) {
    let weighted = d_cos * cos_theta;
    let row_sums = weighted.sum_axis(Axis(1));
    let col_sums = weighted.sum_axis(Axis(0));

    let mut d_z = d_cos.dot(&geometry.unit_weights.t());
    Zip::from(d_z.rows_mut())
        .and(geometry.unit_embeddings.rows())
        .and(&row_sums)
        .and(&geometry.embedding_norms)
        .for_each(|mut dz, u, &rs, &norm| {
            dz.zip_mut_with(&u, |a, &b| *a = (*a - rs * b) / norm);
        });

    let mut d_w = geometry.unit_embeddings.t().dot(d_cos);
    Zip::from(d_w.columns_mut())
        .and(geometry.unit_weights.columns())
        .and(&col_sums)
        .and(&geometry.weight_norms)
        .for_each(|mut dw, u, &cs, &norm| {
            dw.zip_mut_with(&u, |a, &b| *a = (*a - cs * b) / norm);
        });
    (d_z, d_w)
}

/// Analytic gradient of [`ce_loss`]. Quality values are constants here.
pub fn ce_grad(spec: &MarginSpec, batch: &CosineBatch, quality: Option<&[f64]>) -> Result<CeGrad> {
    let output = margin_forward(spec, batch, quality)?;
    let prefactor = gradient_prefactor(&output, &batch.labels);
    let d_cos = &prefactor / batch.batch_size() as f64;
    let (d_embeddings, d_weights) = match &batch.geometry {
        Some(geometry) => {
            let (dz, dw) = project_cos_grad(&d_cos, &batch.cos_theta, geometry);
            (Some(dz), Some(dw))
        }
        None => (None, None),
    };
    Ok(CeGrad {
        loss: output.loss,
        prefactor,
        d_cos,
        d_embeddings,
        d_weights,
    })
}

/// Gradient scaling term of one sample, split into its two factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GstReport {
    pub g: f64,
    /// `P_y − 1`, always in `[−1, 0]`.
    pub prob_term: f64,
    /// `∂f/∂cos θ_y`.
    pub deriv_term: f64,
}

/// Closed-form gradient scaling term for the ground-truth class.
pub fn gst(spec: &MarginSpec, cos_theta_y: f64, p_y: f64, quality: Option<f64>) -> Result<GstReport> {
    if !(0.0..=1.0).contains(&p_y) {
        return Err(Error::Domain { what: "P_y", value: p_y });
    }
    let (_, deriv_term) = spec.positive(cos_theta_y, quality)?;
    let prob_term = p_y - 1.0;
    Ok(GstReport {
        g: prob_term * deriv_term,
        prob_term,
        deriv_term,
    })
}

/// One EMA step of the CurricularFace progression `t`; returns the new value.
pub fn curricular_update_t(spec: &mut MarginSpec, mean_positive_cos: f64) -> f64 {
    let next = spec.t_momentum * spec.t + (1.0 - spec.t_momentum) * mean_positive_cos;
    spec.t = next.clamp(0.0, 1.0);
    spec.t
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(variant: Variant, m: f64) -> MarginSpec {
        MarginSpec::new(variant).with_margin(m)
    }

    #[test]
    fn cosface_at_unit_cosine() {
        let v = margin_logit(&spec(Variant::CosFace, 0.35), 1.0, None).unwrap();
        assert!((v - 41.6).abs() < 1e-12);
    }

    #[test]
    fn arcface_at_zero_angle() {
        let v = margin_logit(&spec(Variant::ArcFace, 0.5), 1.0, None).unwrap();
        assert!((v - 64.0 * 0.5f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn adaface_low_quality_is_arcface() {
        for &c in &[-0.9, -0.3, 0.0, 0.41, 0.99] {
            let a = margin_logit(&spec(Variant::AdaFace, 0.4), c, Some(-1.0)).unwrap();
            let b = margin_logit(&spec(Variant::ArcFace, 0.4), c, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_margin_is_normalized_softmax() {
        for &z in &[-1.0, -0.2, 0.7, 1.0] {
            let v = margin_logit(&spec(Variant::AdaFace, 0.0), 0.3, Some(z)).unwrap();
            assert!((v - 64.0 * 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_quality_and_domain_errors() {
        assert!(matches!(
            margin_logit(&spec(Variant::AdaFace, 0.4), 0.2, None),
            Err(Error::MissingQuality(Variant::AdaFace))
        ));
        assert!(matches!(
            margin_logit(&spec(Variant::CosFace, 0.4), 1.0 + 1e-6, None),
            Err(Error::Domain { .. })
        ));
        // rounding-level excursions are tolerated
        assert!(margin_logit(&spec(Variant::CosFace, 0.4), 1.0 + 1e-12, None).is_ok());
        assert!(margin_logit(&spec(Variant::SphereFace, 4.0), -0.5, None).is_err());
    }

    #[test]
    fn negative_logits() {
        let arc = spec(Variant::ArcFace, 0.5);
        assert!((negative_logit(&arc, 0.3, 10.0).unwrap() - 19.2).abs() < 1e-12);

        let mut cur = spec(Variant::CurricularFace, 0.5);
        cur.t = 0.0;
        // hard branch: positive logit below cos θ_j
        let hard = negative_logit(&cur, 0.9, 0.5).unwrap();
        assert!((hard - 64.0 * 0.81).abs() < 1e-12);
        let easy = negative_logit(&cur, 0.9, 5.0).unwrap();
        assert!((easy - 64.0 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn softmax_edge_cases() {
        let p = softmax_probs(&[3.0; 5]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let p = softmax_probs(&[64.0, -64.0, -64.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(softmax_probs(&[1.0, f64::NAN]).is_err());
        assert!(softmax_probs(&[1000.0, 999.0]).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn saturated_loss_is_zero() {
        let batch = CosineBatch::new(array![[1.0, -1.0]], vec![0]).unwrap();
        let loss = ce_loss(&MarginSpec::new(Variant::Softmax), &batch, None).unwrap();
        assert!(loss.abs() < 1e-12);
        let grad = ce_grad(&MarginSpec::new(Variant::Softmax), &batch, None).unwrap();
        assert!(grad.d_cos.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gst_closed_forms() {
        let cos = gst(&spec(Variant::CosFace, 0.35), 0.123, 0.4, None).unwrap();
        assert_eq!(cos.deriv_term, 64.0);
        let arc = gst(&spec(Variant::ArcFace, 0.4), 0.0, 0.3, None).unwrap();
        assert!((arc.deriv_term - 64.0 * 0.4f64.cos()).abs() < 1e-12);
        assert_eq!(arc.g, arc.prob_term * arc.deriv_term);
        assert!(gst(&spec(Variant::ArcFace, 0.4), 0.0, 1.5, None).is_err());
    }

    #[test]
    fn singular_denominator_is_clamped() {
        let r = gst(&spec(Variant::ArcFace, 0.4), 1.0, 0.5, None).unwrap();
        assert!(r.deriv_term.is_finite());
        let expected = 64.0 * (0.4f64.cos() + 0.4f64.sin() / SINGULAR_DENOM);
        assert!((r.deriv_term - expected).abs() < 1e-9);
    }

    #[test]
    fn curricular_t_update() {
        let mut s = MarginSpec::new(Variant::CurricularFace);
        assert!((curricular_update_t(&mut s, 0.5) - 0.005).abs() < 1e-15);
        for _ in 0..5000 {
            curricular_update_t(&mut s, 0.37);
        }
        assert!((s.t - 0.37).abs() < 1e-12);
        s.t = 0.0;
        let mut prev = s.t;
        for k in 0..1000 {
            let t = curricular_update_t(&mut s, k as f64 / 1000.0);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("magface".parse::<Variant>().is_err());
    }
}
