//! Synthetic identities with known quality.
//!
//! Every identity owns a unit prototype direction. A sample of quality `q` is
//! `q·prototype + (1 − q)·noise_scale·n̂` renormalized to unit length, where `n̂`
//! is a random unit direction. A configurable fraction of training samples is
//! unidentifiable: the prototype term is dropped and only noise remains.
//! Augmentations are vector-space stand-ins for cropping, rescaling and
//! photometric jitter; each lowers the recorded effective quality.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &str = "# adaface-synth-dataset";
pub const SNAPSHOT_VERSION: u32 = 1;
/// Quality retained after one smoothing pass.
pub const BLUR_QUALITY_FACTOR: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub ambient_dim: usize,
    /// Dimension of the random subspace holding every prototype; noise is
    /// isotropic in the full ambient space.
    pub identity_rank: usize,
    /// Training qualities follow `Beta(quality_alpha, quality_beta)`.
    pub quality_alpha: f64,
    pub quality_beta: f64,
    /// Length of the noise direction relative to the unit prototype.
    pub noise_scale: f64,
    pub unidentifiable_fraction: f64,
    pub augment_probability: f64,
    /// Largest fraction of coordinates a random crop may erase.
    pub crop_max_fraction: f64,
    /// Held-out identifiable samples per identity drawn from the training
    /// quality distribution.
    pub heldout_per_identity: usize,
    /// High-quality enrollment samples per identity.
    pub gallery_per_identity: usize,
    /// Held-out probes per identity, quality uniform on `[probe_quality_min, 1]`.
    pub probes_per_identity: usize,
    pub probe_quality_min: f64,
    pub gallery_quality_min: f64,
    /// Identities never seen in training, used as open-set impostors.
    pub num_unenrolled: usize,
    pub unenrolled_probes_per_identity: usize,
    /// Equal-width probe quality bins over `[0, 1]`.
    pub quality_bins: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            samples_per_identity: 60,
            ambient_dim: 128,
            identity_rank: 16,
            quality_alpha: 5.0,
            quality_beta: 2.0,
            noise_scale: 1.5,
            unidentifiable_fraction: 0.1,
            augment_probability: 0.2,
            crop_max_fraction: 0.5,
            heldout_per_identity: 5,
            gallery_per_identity: 2,
            probes_per_identity: 8,
            probe_quality_min: 0.05,
            gallery_quality_min: 0.85,
            num_unenrolled: 50,
            unenrolled_probes_per_identity: 4,
            quality_bins: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_identities < 2 {
            return bad("num_identities must be at least 2");
        }
        if self.samples_per_identity == 0 || self.ambient_dim < 2 {
            return bad("samples_per_identity must be positive and ambient_dim ≥ 2");
        }
        if self.identity_rank < 2 || self.identity_rank > self.ambient_dim {
            return bad("identity_rank must lie in [2, ambient_dim]");
        }
        if !(self.quality_alpha > 0.0 && self.quality_beta > 0.0) {
            return bad("quality distribution parameters must be positive");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.unidentifiable_fraction) {
            return bad("unidentifiable_fraction must lie in [0, 1)");
        }
        if !(self.crop_max_fraction > 0.0 && self.crop_max_fraction < 1.0) {
            return bad("crop_max_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return bad("augment_probability must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.probe_quality_min) || !(0.0..=1.0).contains(&self.gallery_quality_min) {
            return bad("quality bounds must lie in [0, 1]");
        }
        if self.gallery_per_identity == 0 || self.quality_bins == 0 {
            return bad("gallery_per_identity and quality_bins must be positive");
        }
        Ok(())
    }

    /// Bin index of a quality value.
    pub fn quality_bin(&self, q: f64) -> usize {
        ((q * self.quality_bins as f64) as usize).min(self.quality_bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub input: Vec<f64>,
    pub label: usize,
    pub true_quality: f64,
    pub identifiable: bool,
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// One unit row per identity, enrolled identities first.
    pub prototypes: Array2<f64>,
    pub train: Vec<SynthSample>,
    pub heldout: Vec<SynthSample>,
    pub gallery: Vec<SynthSample>,
    pub probes: Vec<SynthSample>,
    pub unenrolled: Vec<SynthSample>,
}

/// Per-identity stream seed.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// `q·prototype + (1 − q)·noise_scale·noise`, renormalized. `noise` is a unit vector.
pub fn compose(prototype: &[f64], noise: &[f64], q: f64, noise_scale: f64) -> Vec<f64> {
    if q == 1.0 {
        return prototype.to_vec();
    }
    normalized(
        prototype
            .iter()
            .zip(noise)
            .map(|(p, n)| q * p + (1.0 - q) * noise_scale * n)
            .collect(),
    )
}

fn identifiable_sample<R: Rng>(rng: &mut R, prototype: &[f64], label: usize, q: f64, noise_scale: f64) -> SynthSample {
    let noise = random_unit(rng, prototype.len());
    SynthSample {
        input: compose(prototype, &noise, q, noise_scale),
        label,
        true_quality: q,
        identifiable: true,
        augmented: false,
    }
}

fn unidentifiable_sample<R: Rng>(rng: &mut R, dim: usize, label: usize) -> SynthSample {
    SynthSample {
        input: random_unit(rng, dim),
        label,
        true_quality: 0.0,
        identifiable: false,
        augmented: false,
    }
}

/// Orthonormal `identity_rank × ambient_dim` basis of the identity subspace.
fn identity_basis(config: &SynthConfig) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let (rank, dim) = (config.identity_rank, config.ambient_dim);
    let mut basis = Array2::<f64>::zeros((rank, dim));
    let mut k = 0;
    while k < rank {
        let mut v = ndarray::Array1::from(random_unit(&mut rng, dim));
        for prev in basis.rows().into_iter().take(k) {
            let proj = prev.dot(&v);
            v.scaled_add(-proj, &prev);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.row_mut(k).assign(&(v / norm));
            k += 1;
        }
    }
    basis
}

/// Builds the full benchmark. Deterministic in `config.seed`; identities are
/// generated independently from derived streams.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let dim = config.ambient_dim;
    let total = config.num_identities + config.num_unenrolled;
    let beta = Beta::new(config.quality_alpha, config.quality_beta)
        .map_err(|e| Error::Config(format!("quality distribution: {e}")))?;

    let basis = identity_basis(config);
    let mut prototypes = Array2::zeros((total, dim));
    let mut train = Vec::with_capacity(config.num_identities * config.samples_per_identity);
    let mut heldout = Vec::new();
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut unenrolled = Vec::new();

    for id in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, id as u64));
        let coords = random_unit(&mut rng, config.identity_rank);
        let proto: Vec<f64> = basis.t().dot(&ndarray::Array1::from(coords)).to_vec();
        prototypes.row_mut(id).iter_mut().zip(&proto).for_each(|(d, &v)| *d = v);

        if id >= config.num_identities {
            for _ in 0..config.unenrolled_probes_per_identity {
                let q = rng.random_range(config.probe_quality_min..=1.0);
                unenrolled.push(identifiable_sample(&mut rng, &proto, id, q, config.noise_scale));
            }
            continue;
        }
        for _ in 0..config.samples_per_identity {
            if rng.random::<f64>() < config.unidentifiable_fraction {
                train.push(unidentifiable_sample(&mut rng, dim, id));
            } else {
                let q = beta.sample(&mut rng);
                train.push(identifiable_sample(&mut rng, &proto, id, q, config.noise_scale));
            }
        }
        for _ in 0..config.heldout_per_identity {
            let q = beta.sample(&mut rng);
            heldout.push(identifiable_sample(&mut rng, &proto, id, q, config.noise_scale));
        }
        for _ in 0..config.gallery_per_identity {
            let q = rng.random_range(config.gallery_quality_min..=1.0);
            gallery.push(identifiable_sample(&mut rng, &proto, id, q, config.noise_scale));
        }
        for _ in 0..config.probes_per_identity {
            let q = rng.random_range(config.probe_quality_min..=1.0);
            probes.push(identifiable_sample(&mut rng, &proto, id, q, config.noise_scale));
        }
    }
    Ok(SynthDataset {
        config: config.clone(),
        prototypes,
        train,
        heldout,
        gallery,
        probes,
        unenrolled,
    })
}

/// Zeroes `len` coordinates starting at `start` (wrapping). Quality scales with
/// the square root of the retained fraction; erasing everything leaves an
/// unidentifiable sample.
pub fn crop_block(sample: &mut SynthSample, start: usize, len: usize) {
    let dim = sample.input.len();
    let len = len.min(dim);
    for k in 0..len {
        sample.input[(start + k) % dim] = 0.0;
    }
    let kept = (dim - len) as f64 / dim as f64;
    sample.true_quality *= kept.sqrt();
    if len == dim {
        sample.identifiable = false;
        sample.true_quality = 0.0;
    }
    sample.augmented = true;
}

/// Rescale analogue: circular convolution with the `[1/4, 1/2, 1/4]` kernel.
pub fn blur(sample: &mut SynthSample) {
    let src = sample.input.clone();
    let dim = src.len();
    for (k, v) in sample.input.iter_mut().enumerate() {
        *v = 0.25 * src[(k + dim - 1) % dim] + 0.5 * src[k] + 0.25 * src[(k + 1) % dim];
    }
    sample.true_quality *= BLUR_QUALITY_FACTOR;
    sample.augmented = true;
}

/// Multiplies the whole vector by `gain` (drawn from `[0.6, 1.4]`).
pub fn photometric(sample: &mut SynthSample, gain: f64) {
    sample.input.iter_mut().for_each(|v| *v *= gain);
    sample.true_quality *= 1.0 - (gain - 1.0).abs();
    sample.augmented = true;
}

/// Applies each augmentation independently with `config.augment_probability`.
pub fn augment<R: Rng + ?Sized>(sample: &SynthSample, config: &SynthConfig, rng: &mut R) -> SynthSample {
    let mut out = sample.clone();
    let p = config.augment_probability;
    if p == 0.0 {
        return out;
    }
    let dim = out.input.len();
    if rng.random::<f64>() < p {
        let max_len = ((config.crop_max_fraction * dim as f64) as usize).clamp(1, dim - 1);
        let len = rng.random_range(1..=max_len);
        let start = rng.random_range(0..dim);
        crop_block(&mut out, start, len);
    }
    if rng.random::<f64>() < p {
        blur(&mut out);
    }
    if rng.random::<f64>() < p {
        let gain = rng.random_range(0.6..=1.4);
        photometric(&mut out, gain);
    }
    out
}

fn write_sample<W: Write>(out: &mut W, split: &str, s: &SynthSample) -> Result<()> {
    write!(
        out,
        "{split}\t{}\t{}\t{}\t{}\t",
        s.label, s.true_quality, s.identifiable as u8, s.augmented as u8
    )?;
    write_vector(out, &s.input)?;
    Ok(())
}

fn write_vector<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.write_all(b",")?;
        }
        write!(out, "{v}")?;
    }
    out.write_all(b"\n")?;
    Ok(())
}

fn parse_vector(field: &str) -> Result<Vec<f64>> {
    field
        .split(',')
        .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("`{v}`: {e}"))))
        .collect()
}

impl SynthDataset {
    /// Writes the self-describing text snapshot.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION}")?;
        writeln!(out, "config\t{}", serde_json::to_string(&self.config)?)?;
        for (id, row) in self.prototypes.rows().into_iter().enumerate() {
            write!(out, "prototype\t{id}\t")?;
            write_vector(&mut out, row.as_slice().expect("standard layout"))?;
        }
        for (split, samples) in [
            ("train", &self.train),
            ("heldout", &self.heldout),
            ("gallery", &self.gallery),
            ("probe", &self.probes),
            ("unenrolled", &self.unenrolled),
        ] {
            for s in samples {
                write_sample(&mut out, split, s)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let magic = lines.next().transpose()?.unwrap_or_default();
        let expected = format!("{SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION}");
        if magic != expected {
            return Err(Error::Parse(format!("not a dataset snapshot (header `{magic}`)")));
        }
        let config_line = lines.next().transpose()?.unwrap_or_default();
        let config: SynthConfig = match config_line.split_once('\t') {
            Some(("config", json)) => serde_json::from_str(json)?,
            _ => return Err(Error::Parse("missing config line".into())),
        };
        let mut protos: Vec<Vec<f64>> = Vec::new();
        let mut ds = SynthDataset {
            config,
            prototypes: Array2::zeros((0, 0)),
            train: Vec::new(),
            heldout: Vec::new(),
            gallery: Vec::new(),
            probes: Vec::new(),
            unenrolled: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols[0] == "prototype" {
                if cols.len() != 3 {
                    return Err(Error::Parse(format!("bad prototype record `{line}`")));
                }
                protos.push(parse_vector(cols[2])?);
                continue;
            }
            if cols.len() != 6 {
                return Err(Error::Parse(format!("bad sample record with {} fields", cols.len())));
            }
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse(format!("bad flag `{other}`"))),
            };
            let sample = SynthSample {
                label: cols[1].parse().map_err(|e| Error::Parse(format!("label: {e}")))?,
                true_quality: cols[2].parse().map_err(|e| Error::Parse(format!("quality: {e}")))?,
                identifiable: flag(cols[3])?,
                augmented: flag(cols[4])?,
                input: parse_vector(cols[5])?,
            };
            match cols[0] {
                "train" => ds.train.push(sample),
                "heldout" => ds.heldout.push(sample),
                "gallery" => ds.gallery.push(sample),
                "probe" => ds.probes.push(sample),
                "unenrolled" => ds.unenrolled.push(sample),
                other => return Err(Error::Parse(format!("unknown split `{other}`"))),
            }
        }
        let dim = ds.config.ambient_dim;
        if protos.iter().any(|p| p.len() != dim) {
            return Err(Error::Parse("prototype dimension mismatch".into()));
        }
        ds.prototypes = Array2::from_shape_vec((protos.len(), dim), protos.concat())
            .map_err(|e| Error::Parse(e.to_string()))?;
        Ok(ds)
    }

    /// Stacks sample inputs into a `rows × ambient_dim` matrix.
    pub fn stack(samples: &[SynthSample]) -> Array2<f64> {
        let dim = samples.first().map_or(0, |s| s.input.len());
        let mut m = Array2::zeros((samples.len(), dim));
        for (mut row, s) in m.rows_mut().into_iter().zip(samples) {
            row.iter_mut().zip(&s.input).for_each(|(d, &v)| *d = v);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_identities: 10,
            samples_per_identity: 20,
            ambient_dim: 32,
            num_unenrolled: 3,
            ..Default::default()
        }
    }

    #[test]
    fn clean_limit_is_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proto = random_unit(&mut rng, 16);
        let noise = random_unit(&mut rng, 16);
        assert_eq!(compose(&proto, &noise, 1.0, 2.0), proto);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_sizes() {
        let cfg = small();
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.train.len(), 200);
        assert_eq!(ds.heldout.len(), 50);
        assert!(ds.heldout.iter().all(|s| s.identifiable));
        assert_eq!(ds.gallery.len(), 20);
        assert_eq!(ds.probes.len(), 80);
        assert_eq!(ds.unenrolled.len(), 12);
        assert_eq!(ds.prototypes.nrows(), 13);
        assert!(ds.unenrolled.iter().all(|s| s.label >= 10));
        assert!(ds.gallery.iter().all(|s| s.true_quality >= cfg.gallery_quality_min));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate(&SynthConfig {
            unidentifiable_fraction: 1.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            augment_probability: 1.5,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn zero_probability_is_identity() {
        let ds = generate(&small()).unwrap();
        let cfg = SynthConfig {
            augment_probability: 0.0,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in &ds.train {
            assert_eq!(&augment(s, &cfg, &mut rng), s);
        }
    }

    #[test]
    fn total_crop_erases_identity() {
        let ds = generate(&small()).unwrap();
        let mut s = ds.train.iter().find(|s| s.identifiable).unwrap().clone();
        crop_block(&mut s, 5, 32);
        assert!(!s.identifiable);
        assert_eq!(s.true_quality, 0.0);
        assert!(s.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn augmentations_reduce_quality() {
        let ds = generate(&small()).unwrap();
        let base = ds.train.iter().find(|s| s.identifiable).unwrap();
        let mut a = base.clone();
        blur(&mut a);
        assert!(a.true_quality < base.true_quality);
        let mut b = base.clone();
        photometric(&mut b, 1.3);
        assert!((b.true_quality - 0.7 * base.true_quality).abs() < 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let ds = generate(&small()).unwrap();
        let mut buf = Vec::new();
        ds.write_snapshot(&mut buf).unwrap();
        let back = SynthDataset::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(SynthDataset::read_snapshot(&b"garbage\n"[..]).is_err());
    }
}
