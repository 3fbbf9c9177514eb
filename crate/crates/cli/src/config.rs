//! Flat `section.key = value` run configuration with strict key checking.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use adaface_core::eval::EvalConfig;
use adaface_core::gradcheck::GradcheckOptions;
use adaface_core::gst_field::{DEFAULT_QUALITY_POINTS, DEFAULT_THETA_POINTS};
use adaface_core::margin::{MarginSpec, Variant};
use adaface_core::quality::ProxyChoice;
use adaface_core::synth::SynthConfig;
use adaface_core::trainer::TrainConfig;
use adaface_core::{Error, Result};

/// Parameter swept by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    H,
    M,
    Proxy,
    AugmentP,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::H => "h",
            AblationAxis::M => "m",
            AblationAxis::Proxy => "proxy",
            AblationAxis::AugmentP => "augment_p",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(AblationAxis::H),
            "m" => Ok(AblationAxis::M),
            "proxy" => Ok(AblationAxis::Proxy),
            "augment_p" => Ok(AblationAxis::AugmentP),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSettings {
    pub variants: Vec<Variant>,
    pub theta_points: usize,
    pub quality_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub variants: Vec<Variant>,
    /// Variant every other one is divided by.
    pub reference: Variant,
    pub warmup: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    /// Load the dataset from a snapshot instead of generating it.
    pub data_snapshot: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub field: FieldSettings,
    pub gradcheck: GradcheckOptions,
    pub timing: TimingSettings,
    pub ablation_axis: AblationAxis,
    pub ablation_values: Vec<String>,
    /// Checkpoint read by `evaluate`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            data_snapshot: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            field: FieldSettings {
                variants: Variant::ALL.to_vec(),
                theta_points: DEFAULT_THETA_POINTS,
                quality_points: DEFAULT_QUALITY_POINTS,
            },
            gradcheck: GradcheckOptions::default(),
            timing: TimingSettings {
                iterations: 200,
                batch_size: 128,
                variants: vec![Variant::ArcFace, Variant::AdaFace],
                reference: Variant::ArcFace,
                warmup: 10,
            },
            ablation_axis: AblationAxis::M,
            ablation_values: vec!["0.4".into(), "0.5".into(), "0.75".into()],
            checkpoint: None,
        }
    }
}

const VARIANT_KEY: &str = "margin.variant";

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.num_identities" => d.num_identities = parse(key, v)?,
            "data.samples_per_identity" => d.samples_per_identity = parse(key, v)?,
            "data.ambient_dim" => d.ambient_dim = parse(key, v)?,
            "data.identity_rank" => d.identity_rank = parse(key, v)?,
            "data.quality_alpha" => d.quality_alpha = parse(key, v)?,
            "data.quality_beta" => d.quality_beta = parse(key, v)?,
            "data.noise_scale" => d.noise_scale = parse(key, v)?,
            "data.unidentifiable_fraction" => d.unidentifiable_fraction = parse(key, v)?,
            "data.augment_probability" => d.augment_probability = parse(key, v)?,
            "data.heldout_per_identity" => d.heldout_per_identity = parse(key, v)?,
            "data.gallery_per_identity" => d.gallery_per_identity = parse(key, v)?,
            "data.probes_per_identity" => d.probes_per_identity = parse(key, v)?,
            "data.probe_quality_min" => d.probe_quality_min = parse(key, v)?,
            "data.gallery_quality_min" => d.gallery_quality_min = parse(key, v)?,
            "data.num_unenrolled" => d.num_unenrolled = parse(key, v)?,
            "data.unenrolled_probes_per_identity" => d.unenrolled_probes_per_identity = parse(key, v)?,
            "data.quality_bins" => d.quality_bins = parse(key, v)?,
            "data.snapshot" => self.data_snapshot = optional_path(v),
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.milestones" => t.milestones = parse_list(key, v)?,
            "train.lr_decay" => t.lr_decay = parse(key, v)?,
            "train.hidden" => t.hidden = parse_list(key, v)?,
            "train.embed_dim" => t.embed_dim = parse(key, v)?,
            "train.use_bias" => t.use_bias = parse_bool(key, v)?,
            "train.tracked_samples" => t.tracked_samples = parse(key, v)?,
            "margin.variant" => {
                let variant: Variant = v.parse()?;
                let MarginSpec { s, t_momentum, .. } = t.spec;
                t.spec = MarginSpec::new(variant).with_scale(s);
                t.spec.t_momentum = t_momentum;
            }
            "margin.m" => t.spec.m = parse(key, v)?,
            "margin.s" => t.spec.s = parse(key, v)?,
            "margin.t_momentum" => t.spec.t_momentum = parse(key, v)?,
            "quality.proxy" => t.proxy = v.parse::<ProxyChoice>()?,
            "quality.h" => t.h = parse(key, v)?,
            "quality.alpha" => t.norm_alpha = parse(key, v)?,
            "quality.literal_ema" => t.literal_ema = parse_bool(key, v)?,
            "eval.fpir" => self.eval.fpir = parse(key, v)?,
            "eval.far" => self.eval.far = parse(key, v)?,
            "eval.hq_quality_min" => self.eval.hq_quality_min = parse(key, v)?,
            "eval.lq_bins" => self.eval.lq_bins = parse(key, v)?,
            "eval.pair_seed" => self.eval.pair_seed = parse(key, v)?,
            "eval.checkpoint" => self.checkpoint = optional_path(v),
            "field.variants" => self.field.variants = parse_list(key, v)?,
            "field.theta_points" => self.field.theta_points = parse(key, v)?,
            "field.quality_points" => self.field.quality_points = parse(key, v)?,
            "gradcheck.instances" => self.gradcheck.instances = parse(key, v)?,
            "gradcheck.batch" => self.gradcheck.batch = parse(key, v)?,
            "gradcheck.classes" => self.gradcheck.classes = parse(key, v)?,
            "gradcheck.dim" => self.gradcheck.dim = parse(key, v)?,
            "gradcheck.step" => self.gradcheck.step = parse(key, v)?,
            "gradcheck.grad_tolerance" => self.gradcheck.grad_tolerance = parse(key, v)?,
            "gradcheck.gst_points" => self.gradcheck.gst_points = parse(key, v)?,
            "gradcheck.gst_step" => self.gradcheck.gst_step = parse(key, v)?,
            "gradcheck.gst_tolerance" => self.gradcheck.gst_tolerance = parse(key, v)?,
            "gradcheck.reduction_batches" => self.gradcheck.reduction_batches = parse(key, v)?,
            "gradcheck.reduction_tolerance" => self.gradcheck.reduction_tolerance = parse(key, v)?,
            "gradcheck.monotone_points" => self.gradcheck.monotone_points = parse(key, v)?,
            "timing.iterations" => self.timing.iterations = parse(key, v)?,
            "timing.batch_size" => self.timing.batch_size = parse(key, v)?,
            "timing.variants" => self.timing.variants = parse_list(key, v)?,
            "timing.reference" => self.timing.reference = parse(key, v)?,
            "timing.warmup" => self.timing.warmup = parse(key, v)?,
            "ablate.axis" => self.ablation_axis = v.parse()?,
            "ablate.values" => self.ablation_values = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        self.apply_overrides(&[assignment])
    }

    /// Applies several overrides; `margin.variant` goes first so that an
    /// explicit `margin.m` is not replaced by the variant's default.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        let mut pairs = Vec::with_capacity(assignments.len());
        for a in assignments {
            let a = a.as_ref();
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not key=value")))?;
            pairs.push((k.trim(), v));
        }
        pairs.sort_by_key(|(k, _)| *k != VARIANT_KEY);
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults. Blank lines and
    /// `#` comments are ignored; repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut lines: Vec<(usize, &str)> = text.lines().enumerate().collect();
        lines.sort_by_key(|(_, l)| !l.trim_start().starts_with(VARIANT_KEY));
        for (n, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Propagates the run seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.data.validate()?;
        self.train.validate()?;
        if self.field.variants.is_empty() || self.field.theta_points == 0 || self.field.quality_points == 0 {
            return Err(Error::Config("field needs at least one variant and point per axis".into()));
        }
        if self.timing.iterations == 0 || self.timing.batch_size == 0 || self.timing.variants.is_empty() {
            return Err(Error::Config("timing needs iterations, batch size and variants".into()));
        }
        for v in &self.ablation_values {
            self.arm(v)?;
        }
        Ok(self)
    }

    /// Copy of this configuration with the ablation axis set to `value`.
    pub fn arm(&self, value: &str) -> Result<RunConfig> {
        let mut cfg = self.clone();
        let key = match self.ablation_axis {
            AblationAxis::H => "quality.h",
            AblationAxis::M => "margin.m",
            AblationAxis::Proxy => "quality.proxy",
            AblationAxis::AugmentP => "data.augment_probability",
        };
        cfg.set(key, value)?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let g = &self.gradcheck;
        vec![
            ("seed", self.seed.to_string()),
            ("data.num_identities", d.num_identities.to_string()),
            ("data.samples_per_identity", d.samples_per_identity.to_string()),
            ("data.ambient_dim", d.ambient_dim.to_string()),
            ("data.identity_rank", d.identity_rank.to_string()),
            ("data.quality_alpha", d.quality_alpha.to_string()),
            ("data.quality_beta", d.quality_beta.to_string()),
            ("data.noise_scale", d.noise_scale.to_string()),
            ("data.unidentifiable_fraction", d.unidentifiable_fraction.to_string()),
            ("data.augment_probability", d.augment_probability.to_string()),
            ("data.heldout_per_identity", d.heldout_per_identity.to_string()),
            ("data.gallery_per_identity", d.gallery_per_identity.to_string()),
            ("data.probes_per_identity", d.probes_per_identity.to_string()),
            ("data.probe_quality_min", d.probe_quality_min.to_string()),
            ("data.gallery_quality_min", d.gallery_quality_min.to_string()),
            ("data.num_unenrolled", d.num_unenrolled.to_string()),
            ("data.unenrolled_probes_per_identity", d.unenrolled_probes_per_identity.to_string()),
            ("data.quality_bins", d.quality_bins.to_string()),
            ("data.snapshot", path_or_empty(&self.data_snapshot)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.milestones", join(&t.milestones)),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.hidden", join(&t.hidden)),
            ("train.embed_dim", t.embed_dim.to_string()),
            ("train.use_bias", t.use_bias.to_string()),
            ("train.tracked_samples", t.tracked_samples.to_string()),
            ("margin.variant", t.spec.variant.to_string()),
            ("margin.m", t.spec.m.to_string()),
            ("margin.s", t.spec.s.to_string()),
            ("margin.t_momentum", t.spec.t_momentum.to_string()),
            ("quality.proxy", t.proxy.to_string()),
            ("quality.h", t.h.to_string()),
            ("quality.alpha", t.norm_alpha.to_string()),
            ("quality.literal_ema", t.literal_ema.to_string()),
            ("eval.fpir", self.eval.fpir.to_string()),
            ("eval.far", self.eval.far.to_string()),
            ("eval.hq_quality_min", self.eval.hq_quality_min.to_string()),
            ("eval.lq_bins", self.eval.lq_bins.to_string()),
            ("eval.pair_seed", self.eval.pair_seed.to_string()),
            ("eval.checkpoint", path_or_empty(&self.checkpoint)),
            ("field.variants", join(&self.field.variants)),
            ("field.theta_points", self.field.theta_points.to_string()),
            ("field.quality_points", self.field.quality_points.to_string()),
            ("gradcheck.instances", g.instances.to_string()),
            ("gradcheck.batch", g.batch.to_string()),
            ("gradcheck.classes", g.classes.to_string()),
            ("gradcheck.dim", g.dim.to_string()),
            ("gradcheck.step", g.step.to_string()),
            ("gradcheck.grad_tolerance", g.grad_tolerance.to_string()),
            ("gradcheck.gst_points", g.gst_points.to_string()),
            ("gradcheck.gst_step", g.gst_step.to_string()),
            ("gradcheck.gst_tolerance", g.gst_tolerance.to_string()),
            ("gradcheck.reduction_batches", g.reduction_batches.to_string()),
            ("gradcheck.reduction_tolerance", g.reduction_tolerance.to_string()),
            ("gradcheck.monotone_points", g.monotone_points.to_string()),
            ("timing.iterations", self.timing.iterations.to_string()),
            ("timing.batch_size", self.timing.batch_size.to_string()),
            ("timing.variants", join(&self.timing.variants)),
            ("timing.reference", self.timing.reference.to_string()),
            ("timing.warmup", self.timing.warmup.to_string()),
            ("ablate.axis", self.ablation_axis.name().to_string()),
            ("ablate.values", self.ablation_values.join(",")),
        ]
    }

    /// Configuration text that parses back to an identical configuration.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
