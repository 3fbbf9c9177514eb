//! Mini-batch SGD over an [`EmbedNet`] feeding a [`HeadState`].

pub mod net;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use net::{Activation, EmbedNet, Layer, LayerGrad, NetGrad};

use crate::error::{Error, Result};
use crate::head::{HeadState, Mode};
use crate::margin::{MarginSpec, Variant};
use crate::quality::{NormStats, ProxyChoice};
use crate::synth::{augment, SynthDataset, SynthSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub spec: MarginSpec,
    pub proxy: ProxyChoice,
    pub h: f64,
    pub norm_alpha: f64,
    pub literal_ema: bool,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Train layer biases; when false they stay at zero and the net is odd.
    pub use_bias: bool,
    /// Training samples whose norm and `P_y` are logged every epoch.
    pub tracked_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![10, 16, 18],
            lr_decay: 0.1,
            seed: 0,
            spec: MarginSpec::new(Variant::AdaFace),
            proxy: ProxyChoice::FeatureNorm,
            h: crate::quality::DEFAULT_H,
            norm_alpha: crate::quality::DEFAULT_ALPHA,
            literal_ema: false,
            hidden: vec![256, 256],
            embed_dim: 64,
            use_bias: false,
            tracked_samples: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1), weight_decay ≥ 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::Config("milestones must be smaller than epochs".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        self.spec.validate()?;
        self.norm_stats().validate()
    }

    pub fn norm_stats(&self) -> NormStats {
        let mut stats = NormStats::new(self.norm_alpha, self.h);
        stats.literal_ema = self.literal_ema;
        stats
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

/// Fresh network and head for `config`, seeded from `config.seed`.
pub fn init_model(config: &TrainConfig, input_dim: usize, classes: usize) -> Result<(EmbedNet, HeadState)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = EmbedNet::new(input_dim, &config.hidden, config.embed_dim, &mut rng)?;
    let head = HeadState::new(
        config.embed_dim,
        classes,
        config.spec,
        config.proxy,
        config.norm_stats(),
        &mut rng,
    )?;
    Ok((net, head))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub update_bias: bool,
    net_velocity: Vec<(Array2<f64>, Array1<f64>)>,
    head_velocity: Array2<f64>,
}

impl Sgd {
    pub fn new(net: &EmbedNet, head: &HeadState, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            update_bias: true,
            net_velocity: net
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect(),
            head_velocity: Array2::zeros(head.weights().dim()),
        }
    }

    fn step_tensor<D: ndarray::Dimension>(
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::Array<f64, D>,
        velocity: &mut ndarray::Array<f64, D>,
        lr: f64,
        momentum: f64,
        decay: f64,
    ) {
        ndarray::Zip::from(param).and(grad).and(velocity).for_each(|p, &g, v| {
            *v = momentum * *v + g + decay * *p;
            *p -= lr * *v;
        });
    }

    pub fn step(&mut self, net: &mut EmbedNet, net_grad: &NetGrad, head: &mut HeadState, head_grad: &Array2<f64>, lr: f64) {
        let (mom, wd) = (self.momentum, self.weight_decay);
        for ((layer, g), (vw, vb)) in net
            .layers_mut()
            .iter_mut()
            .zip(&net_grad.layers)
            .zip(&mut self.net_velocity)
        {
            Self::step_tensor(&mut layer.weights, &g.weights, vw, lr, mom, wd);
            if self.update_bias {
                Self::step_tensor(&mut layer.bias, &g.bias, vb, lr, mom, 0.0);
            }
        }
        let velocity = &mut self.head_velocity;
        head.update_weights(|w| Self::step_tensor(w, head_grad, velocity, lr, mom, wd));
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Pearson correlation of feature norm with true quality on the held-out split.
    pub r_norm: Option<f64>,
    /// Pearson correlation of `P_y` with true quality on the held-out split.
    pub r_prob: Option<f64>,
    pub mu_z: f64,
    pub sigma_z: f64,
    pub curricular_t: f64,
    pub tracked_norms: Vec<f64>,
    pub tracked_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedSample {
    pub index: usize,
    pub true_quality: f64,
    pub identifiable: bool,
}

/// Mean final feature norm of the (unaugmented) training set by group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSplit {
    pub identifiable: f64,
    pub unidentifiable: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub tracked: Vec<TrackedSample>,
    pub final_norms: NormSplit,
    pub net: EmbedNet,
    pub head: HeadState,
}

impl TrainOutcome {
    /// JSON lines, one per epoch.
    pub fn log_lines(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Standard Pearson correlation, clamped to `[−1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson inputs", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Empty("pearson needs at least two samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pearson input"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Embeddings and their raw norms for a sample list.
pub fn embed(net: &EmbedNet, samples: &[SynthSample]) -> Result<(Array2<f64>, Vec<f64>)> {
    let emb = net.infer(SynthDataset::stack(samples).view())?;
    let norms = emb.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    Ok((emb, norms))
}

/// Evaluation-mode `P_y` for labelled samples; the head is not modified.
pub fn ground_truth_probs(net: &EmbedNet, head: &HeadState, samples: &[SynthSample]) -> Result<Vec<f64>> {
    let (emb, _) = embed(net, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let external: Vec<f64> = samples.iter().map(|s| s.true_quality).collect();
    let mut frozen = head.clone();
    Ok(frozen.forward(emb.view(), &labels, Mode::Eval, Some(&external))?.gt_probs())
}

/// `(r_norm, r_prob)` for the given samples.
pub fn quality_correlations(net: &EmbedNet, head: &HeadState, samples: &[SynthSample]) -> Result<(f64, f64)> {
    let quality: Vec<f64> = samples.iter().map(|s| s.true_quality).collect();
    let (_, norms) = embed(net, samples)?;
    let probs = ground_truth_probs(net, head, samples)?;
    Ok((pearson(&norms, &quality)?, pearson(&probs, &quality)?))
}

fn tracked_indices(count: usize, total: usize) -> Vec<usize> {
    let count = count.min(total);
    (0..count).map(|k| k * total / count).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Trains `net` and `head` on `dataset.train`, augmenting each batch with
/// `dataset.config.augment_probability`.
pub fn train(config: &TrainConfig, dataset: &SynthDataset, mut net: EmbedNet, mut head: HeadState) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = &dataset.train;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if net.output_dim() != head.dim() {
        return Err(Error::shape("net output vs head", head.dim(), net.output_dim()));
    }
    let probes = &dataset.heldout;
    let tracked_idx = tracked_indices(config.tracked_samples, train_set.len());
    let tracked_samples: Vec<SynthSample> = tracked_idx.iter().map(|&i| train_set[i].clone()).collect();
    let tracked = tracked_idx
        .iter()
        .map(|&i| TrackedSample {
            index: i,
            true_quality: train_set[i].true_quality,
            identifiable: train_set[i].identifiable,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7EA1);
    let mut sgd = Sgd::new(&net, &head, config.momentum, config.weight_decay);
    sgd.update_bias = config.use_bias;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SynthSample> = chunk
                .iter()
                .map(|&i| augment(&train_set[i], &dataset.config, &mut rng))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let external: Vec<f64> = batch.iter().map(|s| s.true_quality).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                other => other,
            };
            let emb = net.forward(SynthDataset::stack(&batch).view()).map_err(diverged)?;
            let fwd = head
                .forward(emb.view(), &labels, Mode::Train, Some(&external))
                .map_err(diverged)?;
            if !fwd.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: fwd.loss,
                });
            }
            loss_sum += fwd.loss * chunk.len() as f64;
            let head_grad = head.backward(&fwd).map_err(diverged)?;
            let net_grad = net.backward(head_grad.d_embeddings.view()).map_err(diverged)?;
            sgd.step(&mut net, &net_grad, &mut head, &head_grad.d_weights, lr);
            if !net.is_finite() || head.weights().iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: fwd.loss,
                });
            }
            step += 1;
        }
        let (r_norm, r_prob) = if probes.len() >= 2 {
            let quality: Vec<f64> = probes.iter().map(|s| s.true_quality).collect();
            let (_, norms) = embed(&net, probes)?;
            let probs = ground_truth_probs(&net, &head, probes)?;
            (pearson(&norms, &quality).ok(), pearson(&probs, &quality).ok())
        } else {
            (None, None)
        };
        let (tracked_norms, tracked_probs) = if tracked_samples.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (
                embed(&net, &tracked_samples)?.1,
                ground_truth_probs(&net, &head, &tracked_samples)?,
            )
        };
        log.push(EpochRecord {
            epoch,
            step,
            loss: loss_sum / train_set.len() as f64,
            lr,
            r_norm,
            r_prob,
            mu_z: head.norm_stats.mu_z,
            sigma_z: head.norm_stats.sigma_z,
            curricular_t: head.spec.t,
            tracked_norms,
            tracked_probs,
        });
    }

    let (_, norms) = embed(&net, train_set)?;
    let pick = |flag: bool| mean(train_set.iter().zip(&norms).filter(|(s, _)| s.identifiable == flag).map(|(_, &n)| n));
    let final_norms = NormSplit {
        identifiable: pick(true).unwrap_or(f64::NAN),
        unidentifiable: pick(false),
    };
    Ok(TrainOutcome {
        log,
        tracked,
        final_norms,
        net,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let cov = sxy / n - sx * sy / (n * n);
        cov / ((sxx / n - (sx / n).powi(2)).sqrt() * (syy / n - (sy / n).powi(2)).sqrt())
    }

    #[test]
    fn pearson_limits() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[3.0; 4]), Err(Error::ZeroVariance)));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_matches_naive_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(3..60);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v * 0.3 + rng.random_range(-1.0..1.0)).collect();
            assert!((pearson(&x, &y).unwrap() - naive_pearson(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(19) - 1e-4).abs() < 1e-15);
        let bad = TrainConfig {
            milestones: vec![5, 5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let late = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        assert!(late.validate().is_err());
    }

    fn toy() -> (SynthDataset, TrainConfig) {
        let ds = generate(&SynthConfig {
            num_identities: 10,
            samples_per_identity: 20,
            ambient_dim: 16,
            num_unenrolled: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            milestones: vec![],
            hidden: vec![32],
            embed_dim: 8,
            tracked_samples: 4,
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_epochs_is_noop() {
        let (ds, mut cfg) = toy();
        cfg.epochs = 0;
        let (net, head) = init_model(&cfg, 16, 10).unwrap();
        let out = train(&cfg, &ds, net.clone(), head.clone()).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.net, net);
        assert_eq!(out.head, head);
    }

    #[test]
    fn deterministic_log() {
        let (ds, cfg) = toy();
        let run = || {
            let (net, head) = init_model(&cfg, 16, 10).unwrap();
            train(&cfg, &ds, net, head).unwrap().log_lines().unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 5);
    }
}
