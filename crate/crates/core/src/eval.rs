//! Verification and identification metrics over cosine similarity.
//!
//! All thresholded metrics accept a score iff it is strictly greater than the
//! threshold, and candidate thresholds are `−∞` plus the observed negative
//! scores. Picking the smallest candidate that satisfies the rate constraint
//! resolves ties toward the stricter threshold.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{fuse_features, HeadState};
use crate::synth::{SynthDataset, SynthSample};
use crate::trainer::{embed, ground_truth_probs, pearson, EmbedNet, NormSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub left: usize,
    pub right: usize,
    pub genuine: bool,
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let denom = (a.dot(&a) * b.dot(&b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(&b) / denom
    }
}

/// `(score, genuine)` per pair.
pub fn pair_scores(pairs: &[Pair], embeddings: ArrayView2<'_, f64>) -> Result<Vec<(f64, bool)>> {
    let n = embeddings.nrows();
    pairs
        .iter()
        .map(|p| {
            if p.left >= n || p.right >= n {
                return Err(Error::shape("pair index", format!("< {n}"), p.left.max(p.right)));
            }
            Ok((cosine(embeddings.row(p.left), embeddings.row(p.right)), p.genuine))
        })
        .collect()
}

/// Best accuracy over thresholds at every midpoint between sorted scores and
/// beyond both ends.
pub fn verification_accuracy_from_scores(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("verification pairs"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let genuine_total = sorted.iter().filter(|s| s.1).count();
    // Threshold below everything: all accepted.
    let mut correct = genuine_total;
    let mut best = correct;
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j < n && sorted[j].0 == sorted[k].0 {
            if sorted[j].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            j += 1;
        }
        best = best.max(correct);
        k = j;
    }
    Ok(best as f64 / n as f64)
}

pub fn verification_accuracy(pairs: &[Pair], embeddings: ArrayView2<'_, f64>) -> Result<f64> {
    verification_accuracy_from_scores(&pair_scores(pairs, embeddings)?)
}

/// Outcome of a rate-constrained threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// True accept (or identification) rate at the chosen threshold.
    pub rate: f64,
    pub threshold: f64,
    /// False rate actually achieved; never above the target.
    pub achieved: f64,
    /// `false` when the target is below one negative's worth of resolution.
    pub resolvable: bool,
}

/// Smallest threshold in `{−∞} ∪ negatives` whose false-accept fraction is at
/// most `target`.
fn strict_threshold(negatives: &[f64], target: f64) -> (f64, f64) {
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut threshold = f64::NEG_INFINITY;
    let mut above = sorted.len();
    let mut k = 0;
    while above as f64 / n > target {
        // Raise the threshold to the next distinct negative score.
        threshold = sorted[k];
        while k < sorted.len() && sorted[k] == threshold {
            k += 1;
        }
        above = sorted.len() - k;
    }
    (threshold, above as f64 / n)
}

fn check_rate(target: f64, what: &'static str) -> Result<()> {
    if (0.0..=1.0).contains(&target) {
        Ok(())
    } else {
        Err(Error::Domain { what, value: target })
    }
}

pub fn tar_at_far_from_scores(scores: &[(f64, bool)], far: f64) -> Result<OperatingPoint> {
    check_rate(far, "far")?;
    let impostors: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if impostors.is_empty() {
        return Err(Error::NoImpostors);
    }
    let genuine: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    if genuine.is_empty() {
        return Err(Error::Empty("genuine pairs"));
    }
    let (threshold, achieved) = strict_threshold(&impostors, far);
    let accepted = genuine.iter().filter(|&&s| s > threshold).count();
    Ok(OperatingPoint {
        rate: accepted as f64 / genuine.len() as f64,
        threshold,
        achieved,
        resolvable: far * impostors.len() as f64 >= 1.0,
    })
}

pub fn tar_at_far(pairs: &[Pair], embeddings: ArrayView2<'_, f64>, far: f64) -> Result<OperatingPoint> {
    tar_at_far_from_scores(&pair_scores(pairs, embeddings)?, far)
}

/// One fused, unit-length template per enrolled identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    /// Identity of each template row, ascending.
    pub labels: Vec<usize>,
    pub templates: Array2<f64>,
}

impl Gallery {
    /// Fuses every identity's raw embeddings with their norms as weights.
    pub fn build(embeddings: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::shape("gallery labels", embeddings.nrows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::Empty("gallery"));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let mut templates = Array2::zeros((groups.len(), embeddings.ncols()));
        for (row, rows) in groups.values().enumerate() {
            let feats = embeddings.select(ndarray::Axis(0), rows);
            let norms: Vec<f64> = feats.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            templates.row_mut(row).assign(&fuse_features(feats.view(), &norms)?);
        }
        Ok(Self {
            labels: groups.into_keys().collect(),
            templates,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Cosine score of one probe against every template.
    pub fn scores(&self, probe: ArrayView1<'_, f64>) -> Vec<f64> {
        self.templates.rows().into_iter().map(|t| cosine(probe, t)).collect()
    }

    fn position(&self, label: usize) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }
}

/// Rank of the true template, counting only strictly better impostor
/// templates, plus the probe's top score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub rank: usize,
    pub top_score: f64,
}

pub fn probe_results(probes: ArrayView2<'_, f64>, labels: &[usize], gallery: &Gallery) -> Result<Vec<ProbeResult>> {
    if probes.nrows() != labels.len() {
        return Err(Error::shape("probe labels", probes.nrows(), labels.len()));
    }
    probes
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &l)| {
            let pos = gallery
                .position(l)
                .ok_or_else(|| Error::Config(format!("probe identity {l} is not enrolled")))?;
            let scores = gallery.scores(p);
            let own = scores[pos];
            Ok(ProbeResult {
                rank: 1 + scores.iter().filter(|&&s| s > own).count(),
                top_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

fn top_scores(probes: ArrayView2<'_, f64>, gallery: &Gallery) -> Vec<f64> {
    probes
        .rows()
        .into_iter()
        .map(|p| gallery.scores(p).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn check_k(k: usize, gallery: &Gallery) -> Result<()> {
    if k == 0 || k > gallery.len() {
        return Err(Error::RankTooLarge { k, gallery: gallery.len() });
    }
    Ok(())
}

/// Fraction of probes whose identity is among the `k` best templates.
pub fn rank_retrieval(probes: ArrayView2<'_, f64>, labels: &[usize], gallery: &Gallery, k: usize) -> Result<f64> {
    check_k(k, gallery)?;
    if labels.is_empty() {
        return Err(Error::Empty("probes"));
    }
    let results = probe_results(probes, labels, gallery)?;
    Ok(results.iter().filter(|r| r.rank <= k).count() as f64 / results.len() as f64)
}

/// Open-set identification rate at a false-positive identification target.
pub fn tpir_at_fpir(
    probes: ArrayView2<'_, f64>,
    labels: &[usize],
    unenrolled: ArrayView2<'_, f64>,
    gallery: &Gallery,
    fpir: f64,
) -> Result<OperatingPoint> {
    check_rate(fpir, "fpir")?;
    if unenrolled.nrows() == 0 {
        return Err(Error::NoImpostors);
    }
    if labels.is_empty() {
        return Err(Error::Empty("probes"));
    }
    let negatives = top_scores(unenrolled, gallery);
    let (threshold, achieved) = strict_threshold(&negatives, fpir);
    let results = probe_results(probes, labels, gallery)?;
    let hits = results.iter().filter(|r| r.rank == 1 && r.top_score > threshold).count();
    Ok(OperatingPoint {
        rate: hits as f64 / results.len() as f64,
        threshold,
        achieved,
        resolvable: fpir * negatives.len() as f64 >= 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityCorrelation {
    pub r_norm: f64,
    pub r_prob: f64,
}

pub fn quality_correlation_report(norms: &[f64], gt_probs: &[f64], true_quality: &[f64]) -> Result<QualityCorrelation> {
    Ok(QualityCorrelation {
        r_norm: pearson(norms, true_quality)?,
        r_prob: pearson(gt_probs, true_quality)?,
    })
}

/// Every genuine pair among `labels`, plus the same number of impostor pairs
/// drawn without replacement under `seed`.
pub fn balanced_pairs(labels: &[usize], seed: u64) -> Vec<Pair> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let pair = Pair {
                left: i,
                right: j,
                genuine: labels[i] == labels[j],
            };
            if pair.genuine {
                genuine.push(pair);
            } else {
                impostor.push(pair);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    impostor.shuffle(&mut rng);
    impostor.truncate(genuine.len().max(1));
    genuine.extend(impostor);
    genuine
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub fpir: f64,
    pub far: f64,
    /// Probes at or above this quality form the high-quality verification set.
    pub hq_quality_min: f64,
    /// Number of lowest quality bins averaged into the low-quality composite.
    pub lq_bins: usize,
    pub pair_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpir: 0.01,
            far: 0.01,
            hq_quality_min: 0.75,
            lq_bins: 2,
            pair_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: usize,
    pub quality_range: (f64, f64),
    pub probes: usize,
    pub rank1: f64,
    pub tpir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Verification accuracy on high-quality pairs.
    pub hq_verification: f64,
    pub hq_tar_at_far: OperatingPoint,
    pub rank1: f64,
    pub rank5: f64,
    pub tpir_at_fpir: OperatingPoint,
    pub bins: Vec<BinMetrics>,
    /// Mean of rank-1 and TPIR over the lowest quality bins.
    pub lq_composite: f64,
    pub hq_composite: f64,
    pub correlation: Option<QualityCorrelation>,
    pub train_norms: NormSplit,
}

fn labels_of(samples: &[SynthSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

/// Full benchmark evaluation of a trained model.
pub fn evaluate(net: &EmbedNet, head: &HeadState, dataset: &SynthDataset, config: &EvalConfig) -> Result<MetricReport> {
    let cfg = &dataset.config;
    let (gallery_emb, _) = embed(net, &dataset.gallery)?;
    let gallery = Gallery::build(gallery_emb.view(), &labels_of(&dataset.gallery))?;
    let (probe_emb, _) = embed(net, &dataset.probes)?;
    let probe_labels = labels_of(&dataset.probes);
    let (unenrolled_emb, _) = embed(net, &dataset.unenrolled)?;

    let rank1 = rank_retrieval(probe_emb.view(), &probe_labels, &gallery, 1)?;
    let rank5 = rank_retrieval(probe_emb.view(), &probe_labels, &gallery, 5.min(gallery.len()))?;
    let tpir = tpir_at_fpir(probe_emb.view(), &probe_labels, unenrolled_emb.view(), &gallery, config.fpir)?;

    let mut bins = Vec::with_capacity(cfg.quality_bins);
    for bin in 0..cfg.quality_bins {
        let rows: Vec<usize> = (0..dataset.probes.len())
            .filter(|&i| cfg.quality_bin(dataset.probes[i].true_quality) == bin)
            .collect();
        let width = 1.0 / cfg.quality_bins as f64;
        let range = (bin as f64 * width, (bin + 1) as f64 * width);
        if rows.is_empty() {
            bins.push(BinMetrics {
                bin,
                quality_range: range,
                probes: 0,
                rank1: f64::NAN,
                tpir: f64::NAN,
            });
            continue;
        }
        let emb = probe_emb.select(ndarray::Axis(0), &rows);
        let labels: Vec<usize> = rows.iter().map(|&i| probe_labels[i]).collect();
        bins.push(BinMetrics {
            bin,
            quality_range: range,
            probes: rows.len(),
            rank1: rank_retrieval(emb.view(), &labels, &gallery, 1)?,
            tpir: tpir_at_fpir(emb.view(), &labels, unenrolled_emb.view(), &gallery, config.fpir)?.rate,
        });
    }
    let low: Vec<&BinMetrics> = bins.iter().take(config.lq_bins).filter(|b| b.probes > 0).collect();
    if low.is_empty() {
        return Err(Error::Empty("low-quality probe bins"));
    }
    let lq_composite = low.iter().map(|b| 0.5 * (b.rank1 + b.tpir)).sum::<f64>() / low.len() as f64;

    let hq: Vec<SynthSample> = dataset
        .probes
        .iter()
        .chain(&dataset.gallery)
        .filter(|s| s.true_quality >= config.hq_quality_min)
        .cloned()
        .collect();
    let (hq_emb, _) = embed(net, &hq)?;
    let pairs = balanced_pairs(&labels_of(&hq), config.pair_seed);
    let scores = pair_scores(&pairs, hq_emb.view())?;
    let hq_verification = verification_accuracy_from_scores(&scores)?;
    let hq_tar_at_far = tar_at_far_from_scores(&scores, config.far)?;

    let correlation = if dataset.heldout.len() >= 2 {
        let (_, norms) = embed(net, &dataset.heldout)?;
        let probs = ground_truth_probs(net, head, &dataset.heldout)?;
        let quality: Vec<f64> = dataset.heldout.iter().map(|s| s.true_quality).collect();
        quality_correlation_report(&norms, &probs, &quality).ok()
    } else {
        None
    };

    let (_, train_norms) = embed(net, &dataset.train)?;
    let group_mean = |flag: bool| {
        let v: Vec<f64> = dataset
            .train
            .iter()
            .zip(&train_norms)
            .filter(|(s, _)| s.identifiable == flag)
            .map(|(_, &n)| n)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };

    Ok(MetricReport {
        hq_verification,
        hq_tar_at_far,
        rank1,
        rank5,
        tpir_at_fpir: tpir,
        bins,
        lq_composite,
        hq_composite: hq_verification,
        correlation,
        train_norms: NormSplit {
            identifiable: group_mean(true).unwrap_or(f64::NAN),
            unidentifiable: group_mean(false),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separable_and_degenerate_verification() {
        let scores = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(verification_accuracy_from_scores(&scores).unwrap(), 1.0);
        let tied = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(verification_accuracy_from_scores(&tied).unwrap(), 0.5);
        assert!(verification_accuracy_from_scores(&[]).is_err());
    }

    #[test]
    fn tar_limits() {
        let scores = [(0.9, true), (0.3, true), (0.5, false), (0.1, false)];
        let all = tar_at_far_from_scores(&scores, 1.0).unwrap();
        assert_eq!(all.rate, 1.0);
        assert_eq!(all.threshold, f64::NEG_INFINITY);
        let strict = tar_at_far_from_scores(&scores, 0.0).unwrap();
        assert_eq!(strict.threshold, 0.5);
        assert_eq!(strict.rate, 0.5);
        assert!(!tar_at_far_from_scores(&scores, 0.1).unwrap().resolvable);
        assert!(matches!(tar_at_far_from_scores(&[(0.2, true)], 0.1), Err(Error::NoImpostors)));
    }

    #[test]
    fn tied_impostors_move_threshold_up() {
        let scores = [(0.5, true), (0.5, false), (0.5, false), (0.1, false)];
        let op = tar_at_far_from_scores(&scores, 0.5).unwrap();
        assert_eq!(op.threshold, 0.5);
        assert!(op.achieved <= 0.5);
        assert_eq!(op.rate, 0.0);
    }

    #[test]
    fn retrieval_basics() {
        let gal = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let gallery = Gallery::build(gal.view(), &[7, 8, 9]).unwrap();
        let probe = array![[2.0, 0.1]];
        assert_eq!(rank_retrieval(probe.view(), &[7], &gallery, 1).unwrap(), 1.0);
        assert_eq!(rank_retrieval(probe.view(), &[9], &gallery, 1).unwrap(), 0.0);
        assert_eq!(rank_retrieval(probe.view(), &[9], &gallery, 3).unwrap(), 1.0);
        assert!(matches!(
            rank_retrieval(probe.view(), &[9], &gallery, 4),
            Err(Error::RankTooLarge { .. })
        ));
        assert!(rank_retrieval(probe.view(), &[3], &gallery, 1).is_err());
    }

    #[test]
    fn gallery_fuses_per_identity() {
        let gal = array![[1.0, 0.0], [0.0, 3.0], [0.0, 1.0]];
        let gallery = Gallery::build(gal.view(), &[4, 2, 4]).unwrap();
        assert_eq!(gallery.labels, vec![2, 4]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((gallery.templates[[1, 0]] - s).abs() < 1e-15);
        assert!((gallery.templates[[1, 1]] - s).abs() < 1e-15);
    }

    #[test]
    fn tpir_full_acceptance_is_rank1() {
        let gal = array![[1.0, 0.0], [0.0, 1.0]];
        let gallery = Gallery::build(gal.view(), &[0, 1]).unwrap();
        let probes = array![[1.0, 0.2], [0.9, 0.5], [0.1, 1.0]];
        let labels = [0, 1, 1];
        let unenrolled = array![[1.0, 1.0], [-1.0, -0.5]];
        let op = tpir_at_fpir(probes.view(), &labels, unenrolled.view(), &gallery, 1.0).unwrap();
        let r1 = rank_retrieval(probes.view(), &labels, &gallery, 1).unwrap();
        assert_eq!(op.rate, r1);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            tpir_at_fpir(probes.view(), &labels, empty.view(), &gallery, 0.1),
            Err(Error::NoImpostors)
        ));
    }

    #[test]
    fn balanced_pair_counts() {
        let pairs = balanced_pairs(&[0, 0, 1, 1, 2], 3);
        assert_eq!(pairs.iter().filter(|p| p.genuine).count(), 2);
        assert_eq!(pairs.iter().filter(|p| !p.genuine).count(), 2);
    }
}
