//! The classification head: bias-free cosine classifier plus a margin variant
//! and the quality proxy that feeds adaptive variants.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{
    self, curricular_update_t, gst, margin_forward, project_cos_grad, softmax_probs, CosineBatch, Geometry,
    GstReport, MarginSpec,
};
use crate::quality::{proxy_value, NormStats, ProxyChoice, ProxyInputs};

static NEXT_HEAD_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_HEAD_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Updates norm statistics (and the curricular state) before computing the loss.
    Train,
    /// Read-only.
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadState {
    /// `d × C`; columns are unit-normalized on every forward pass.
    weights: Array2<f64>,
    pub norm_stats: NormStats,
    pub spec: MarginSpec,
    pub proxy: ProxyChoice,
    /// Identifies the current parameter values; forward results carry a copy.
    #[serde(skip, default = "fresh_id")]
    version: u64,
}

impl PartialEq for HeadState {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.norm_stats == other.norm_stats
            && self.spec == other.spec
            && self.proxy == other.proxy
    }
}

impl HeadState {
    /// Random head with unit-length, spherically distributed class weights.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        classes: usize,
        spec: MarginSpec,
        proxy: ProxyChoice,
        norm_stats: NormStats,
        rng: &mut R,
    ) -> Result<Self> {
        let mut weights = Array2::from_shape_simple_fn((dim, classes), || rng.sample::<f64, _>(StandardNormal));
        for mut col in weights.columns_mut() {
            let norm = col.dot(&col).sqrt();
            col.mapv_inplace(|v| v / norm);
        }
        Self::from_weights(weights, spec, proxy, norm_stats)
    }

    pub fn from_weights(
        weights: Array2<f64>,
        spec: MarginSpec,
        proxy: ProxyChoice,
        norm_stats: NormStats,
    ) -> Result<Self> {
        let (dim, classes) = weights.dim();
        if dim < 2 || classes < 2 {
            return Err(Error::shape("head weights", "d ≥ 2, C ≥ 2", format!("{dim}×{classes}")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("head weights"));
        }
        spec.validate()?;
        norm_stats.validate()?;
        Ok(Self {
            weights,
            norm_stats,
            spec,
            proxy,
            version: fresh_id(),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mutates the weights; invalidates outstanding forward results.
    pub fn update_weights(&mut self, f: impl FnOnce(&mut Array2<f64>)) {
        f(&mut self.weights);
        self.version = fresh_id();
    }

    fn check_inputs(&self, embeddings: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        if embeddings.ncols() != self.dim() {
            return Err(Error::shape("embedding dim", self.dim(), embeddings.ncols()));
        }
        if embeddings.nrows() != labels.len() {
            return Err(Error::shape("labels", embeddings.nrows(), labels.len()));
        }
        Ok(())
    }

    /// Full forward pass. In [`Mode::Train`] the norm statistics are folded in
    /// from the raw embedding norms before `ẑ` is computed.
    pub fn forward(
        &mut self,
        embeddings: ArrayView2<'_, f64>,
        labels: &[usize],
        mode: Mode,
        external_quality: Option<&[f64]>,
    ) -> Result<BatchForward> {
        self.check_inputs(&embeddings, labels)?;
        let batch = CosineBatch::from_vectors(&embeddings.to_owned(), &self.weights, labels.to_vec())?;
        if mode == Mode::Train {
            let norms = &batch.geometry.as_ref().expect("built from vectors").embedding_norms;
            self.norm_stats.update(norms)?;
            if self.spec.variant == margin::Variant::CurricularFace {
                let pos = batch.positive_cosines();
                let mean = pos.iter().sum::<f64>() / pos.len() as f64;
                curricular_update_t(&mut self.spec, mean);
            }
        }
        let z_hat = if self.spec.variant.uses_quality() {
            Some(self.proxy_values(&batch, external_quality)?)
        } else {
            None
        };
        self.evaluate(embeddings, batch, z_hat)
    }

    /// Forward pass with caller-supplied quality values; never touches state.
    pub fn forward_with_quality(
        &self,
        embeddings: ArrayView2<'_, f64>,
        labels: &[usize],
        z_hat: &[f64],
    ) -> Result<BatchForward> {
        self.check_inputs(&embeddings, labels)?;
        if z_hat.len() != labels.len() {
            return Err(Error::shape("z_hat", labels.len(), z_hat.len()));
        }
        let batch = CosineBatch::from_vectors(&embeddings.to_owned(), &self.weights, labels.to_vec())?;
        let z_hat = self.spec.variant.uses_quality().then(|| z_hat.to_vec());
        self.evaluate(embeddings, batch, z_hat)
    }

    /// Quality proxy for each sample, detached from the graph.
    fn proxy_values(&self, batch: &CosineBatch, external: Option<&[f64]>) -> Result<Vec<f64>> {
        let norms = &batch.geometry.as_ref().expect("built from vectors").embedding_norms;
        let gt_probs = if self.proxy == ProxyChoice::GroundTruthProb {
            // P_y of the plain normalized softmax, so the proxy does not depend on itself.
            let mut probs = Vec::with_capacity(batch.batch_size());
            for (row, &y) in batch.cos_theta.rows().into_iter().zip(&batch.labels) {
                let logits: Vec<f64> = row.iter().map(|c| self.spec.s * c).collect();
                probs.push(softmax_probs(&logits)?[y]);
            }
            Some(probs)
        } else {
            None
        };
        proxy_value(
            self.proxy,
            &self.norm_stats,
            &ProxyInputs {
                norms: Some(norms),
                gt_probs: gt_probs.as_deref(),
                external,
            },
        )
    }

    fn evaluate(&self, embeddings: ArrayView2<'_, f64>, batch: CosineBatch, z_hat: Option<Vec<f64>>) -> Result<BatchForward> {
        let out = margin_forward(&self.spec, &batch, z_hat.as_deref())?;
        let mut gst_reports = Vec::with_capacity(batch.batch_size());
        for (i, &y) in batch.labels.iter().enumerate() {
            let q = z_hat.as_ref().map(|z| z[i]);
            gst_reports.push(gst(&self.spec, batch.cos_theta[[i, y]], out.probs[[i, y]], q)?);
        }
        let CosineBatch {
            cos_theta,
            labels,
            geometry,
        } = batch;
        let geometry = geometry.expect("built from vectors");
        Ok(BatchForward {
            embeddings: embeddings.to_owned(),
            norms: geometry.embedding_norms.clone(),
            labels,
            cos_theta,
            z_hat,
            logits: out.logits,
            probs: out.probs,
            logit_derivs: out.logit_derivs,
            losses: out.losses,
            loss: out.loss,
            gst: gst_reports,
            geometry,
            head_version: self.version,
        })
    }

    /// Analytic gradients of the mean loss with respect to the raw weights and
    /// raw embeddings. `ẑ` and the norm statistics are constants.
    pub fn backward(&self, fwd: &BatchForward) -> Result<HeadGrad> {
        if fwd.head_version != self.version {
            return Err(Error::StaleForward);
        }
        let mut pre = fwd.probs.clone();
        for (i, &y) in fwd.labels.iter().enumerate() {
            pre[[i, y]] -= 1.0;
        }
        pre *= &fwd.logit_derivs;
        pre /= fwd.labels.len() as f64;
        let (d_embeddings, d_weights) = project_cos_grad(&pre, &fwd.cos_theta, &fwd.geometry);
        Ok(HeadGrad {
            d_weights,
            d_embeddings,
        })
    }
}

/// Everything produced by one forward pass of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchForward {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    /// Raw (pre-normalization) embedding norms.
    pub norms: Vec<f64>,
    pub cos_theta: Array2<f64>,
    /// Quality values fed to the margin; `None` for variants that ignore quality.
    pub z_hat: Option<Vec<f64>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub logit_derivs: Array2<f64>,
    pub losses: Vec<f64>,
    pub loss: f64,
    pub gst: Vec<GstReport>,
    geometry: Geometry,
    head_version: u64,
}

impl BatchForward {
    /// Probability of the ground-truth class for each sample.
    pub fn gt_probs(&self) -> Vec<f64> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.probs[[i, y]])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    /// `d × C`
    pub d_weights: Array2<f64>,
    /// `batch × d`
    pub d_embeddings: Array2<f64>,
}

/// Norm-weighted average of unit-normalized features, re-normalized.
pub fn fuse_features(features: ArrayView2<'_, f64>, norms: &[f64]) -> Result<Array1<f64>> {
    if features.nrows() == 0 {
        return Err(Error::Empty("feature list"));
    }
    if norms.len() != features.nrows() {
        return Err(Error::shape("fusion norms", features.nrows(), norms.len()));
    }
    let mut fused = Array1::zeros(features.ncols());
    for (row, &w) in features.axis_iter(Axis(0)).zip(norms) {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Domain {
                what: "fusion weight",
                value: w,
            });
        }
        let len = row.dot(&row).sqrt();
        if len == 0.0 {
            continue;
        }
        fused.scaled_add(w / len, &row);
    }
    let len = fused.dot(&fused).sqrt();
    if len == 0.0 || !len.is_finite() {
        return Err(Error::DegenerateFusion);
    }
    fused /= len;
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margin::Variant;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(variant: Variant) -> HeadState {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        HeadState::new(
            4,
            3,
            MarginSpec::new(variant),
            ProxyChoice::FeatureNorm,
            NormStats::default(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn weights_start_unit_length() {
        let h = head(Variant::ArcFace);
        for col in h.weights().columns() {
            assert!((col.dot(&col) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_sample_has_no_gradient() {
        let w = array![[1.0, -1.0], [0.0, 0.0]];
        let h = HeadState::from_weights(w, MarginSpec::new(Variant::Softmax), ProxyChoice::FeatureNorm, NormStats::default())
            .unwrap();
        let z = array![[3.0, 0.0]];
        let fwd = h.forward_with_quality(z.view(), &[0], &[0.0]).unwrap();
        assert!(fwd.loss < 1e-12);
        assert!(fwd.gst[0].g.abs() < 1e-10);
        let g = h.backward(&fwd).unwrap();
        assert!(g.d_weights.iter().chain(g.d_embeddings.iter()).all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn rejects_zero_embeddings_and_stale_state() {
        let mut h = head(Variant::CosFace);
        let z = array![[0.0, 0.0, 0.0, 0.0]];
        assert!(matches!(h.forward(z.view(), &[0], Mode::Eval, None), Err(Error::ZeroNorm(0))));

        let z = array![[1.0, 2.0, 0.5, -1.0]];
        let fwd = h.forward(z.view(), &[1], Mode::Train, None).unwrap();
        assert!(h.backward(&fwd).is_ok());
        h.update_weights(|w| w[[0, 0]] += 0.1);
        assert!(matches!(h.backward(&fwd), Err(Error::StaleForward)));
    }

    #[test]
    fn eval_mode_leaves_stats_alone() {
        let mut h = head(Variant::AdaFace);
        let z = array![[1.0, 2.0, 0.5, -1.0], [0.3, 0.1, 2.0, 1.0]];
        h.forward(z.view(), &[0, 2], Mode::Train, None).unwrap();
        let stats = h.norm_stats.clone();
        let a = h.forward(z.view(), &[0, 2], Mode::Eval, None).unwrap();
        let b = h.forward(z.view(), &[0, 2], Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats, h.norm_stats);
    }

    #[test]
    fn adaptive_forward_needs_initialized_stats() {
        let mut h = head(Variant::AdaFace);
        let z = array![[1.0, 2.0, 0.5, -1.0]];
        assert!(matches!(
            h.forward(z.view(), &[0], Mode::Eval, None),
            Err(Error::UninitializedStats)
        ));
    }

    #[test]
    fn fusion_cases() {
        let single = fuse_features(array![[3.0, 4.0]].view(), &[2.0]).unwrap();
        assert!((single[0] - 0.6).abs() < 1e-15 && (single[1] - 0.8).abs() < 1e-15);

        let same = fuse_features(array![[1.0, 1.0], [5.0, 5.0]].view(), &[0.3, 9.0]).unwrap();
        assert!((same[0] - same[1]).abs() < 1e-15);

        let first = fuse_features(array![[2.0, 0.0], [0.0, 7.0]].view(), &[10.0, 0.0]).unwrap();
        assert_eq!(first.to_vec(), vec![1.0, 0.0]);

        assert!(matches!(
            fuse_features(Array2::<f64>::zeros((0, 2)).view(), &[]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            fuse_features(array![[1.0, 0.0], [-1.0, 0.0]].view(), &[1.0, 1.0]),
            Err(Error::DegenerateFusion)
        ));
    }
}
