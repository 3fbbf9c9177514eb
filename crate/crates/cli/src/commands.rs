//! The experiment commands behind the `adaface` binary.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use adaface_core::checkpoint::Checkpoint;
use adaface_core::eval::{evaluate, MetricReport};
use adaface_core::gradcheck::{run_gradcheck as gradcheck_suite, GradcheckReport};
use adaface_core::gst_field::{compute_field, domain_theta_axis, export_field, quality_axis, NegativeModel};
use adaface_core::head::Mode;
use adaface_core::margin::{MarginSpec, Variant};
use adaface_core::synth::{generate, SynthDataset};
use adaface_core::trainer::{init_model, train, Sgd, TrainOutcome};
use adaface_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::RunDir;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ARMS_FILE: &str = "arms.jsonl";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const TIMING_FILE: &str = "timing.json";

/// Generates the configured dataset, or loads the configured snapshot.
pub fn load_dataset(config: &RunConfig) -> CliResult<SynthDataset> {
    match &config.data_snapshot {
        Some(path) => {
            let mut ds = SynthDataset::read_snapshot(BufReader::new(File::open(path)?))?;
            ds.config.augment_probability = config.data.augment_probability;
            Ok(ds)
        }
        None => Ok(generate(&config.data)?),
    }
}

/// Trains and evaluates one model on `dataset`.
pub fn train_and_evaluate(config: &RunConfig, dataset: &SynthDataset) -> CliResult<(TrainOutcome, MetricReport)> {
    let (net, head) = init_model(&config.train, dataset.config.ambient_dim, dataset.config.num_identities)?;
    let outcome = train(&config.train, dataset, net, head)?;
    let report = evaluate(&outcome.net, &outcome.head, dataset, &config.eval)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub report: MetricReport,
}

pub fn run_train(config: &RunConfig, out: &RunDir) -> CliResult<TrainArtifacts> {
    out.write_manifest("train", config)?;
    let dataset = load_dataset(config)?;
    let (outcome, report) = train_and_evaluate(config, &dataset)?;
    out.write_text(LOG_FILE, &outcome.log_lines()?)?;
    let ckpt = Checkpoint::new(config.train.clone(), outcome.net.clone(), outcome.head.clone());
    out.write_with(CHECKPOINT_FILE, |w| ckpt.write(w))?;
    out.write_text(METRICS_FILE, &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(TrainArtifacts { outcome, report })
}

pub fn run_evaluate(config: &RunConfig, out: &RunDir) -> CliResult<MetricReport> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs eval.checkpoint".into()))?;
    let ckpt = Checkpoint::read(BufReader::new(File::open(path)?))?;
    out.write_manifest("evaluate", config)?;
    let dataset = load_dataset(config)?;
    let report = evaluate(&ckpt.net, &ckpt.head, &dataset, &config.eval)?;
    out.write_text(METRICS_FILE, &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub hq_composite: f64,
    pub lq_composite: f64,
    pub rank1: f64,
    pub tpir: f64,
    pub r_norm: Option<f64>,
}

/// One training arm per ablation value, all on the same dataset and seed.
pub fn run_ablation(config: &RunConfig, out: &RunDir) -> CliResult<Vec<AblationRow>> {
    if config.ablation_values.len() < 2 {
        return Err(Error::Config("an ablation needs at least two values".into()).into());
    }
    let arms = config
        .ablation_values
        .iter()
        .map(|v| config.arm(v))
        .collect::<Result<Vec<_>, _>>()?;
    out.write_manifest("ablate", config)?;
    let base = load_dataset(config)?;
    let mut rows = Vec::with_capacity(arms.len());
    let mut reports = String::new();
    for (value, arm) in config.ablation_values.iter().zip(&arms) {
        let mut dataset = base.clone();
        dataset.config.augment_probability = arm.data.augment_probability;
        let (_, report) = train_and_evaluate(arm, &dataset)?;
        reports.push_str(&serde_json::to_string(&report).map_err(Error::from)?);
        reports.push('\n');
        rows.push(AblationRow {
            axis: config.ablation_axis.name().to_string(),
            value: value.clone(),
            hq_composite: report.hq_composite,
            lq_composite: report.lq_composite,
            rank1: report.rank1,
            tpir: report.tpir_at_fpir.rate,
            r_norm: report.correlation.map(|c| c.r_norm),
        });
    }
    let mut table = String::from("axis,value,hq_composite,lq_composite,rank1,tpir,r_norm\n");
    for r in &rows {
        let r_norm = r.r_norm.map(|v| v.to_string()).unwrap_or_default();
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.hq_composite, r.lq_composite, r.rank1, r.tpir, r_norm
        ));
    }
    out.write_text(ABLATION_FILE, &table)?;
    out.write_text(ARMS_FILE, &reports)?;
    Ok(rows)
}

pub fn field_file_name(variant: Variant) -> String {
    format!("gst_{}.csv", variant.name())
}

/// Writes one GST table per configured variant.
pub fn run_gst_field(config: &RunConfig, out: &RunDir) -> CliResult<Vec<std::path::PathBuf>> {
    out.write_manifest("gst-field", config)?;
    let qualities = quality_axis(config.field.quality_points);
    let mut written = Vec::new();
    for &variant in &config.field.variants {
        let mut spec = MarginSpec::new(variant).with_scale(config.train.spec.s);
        if variant == config.train.spec.variant {
            spec.m = config.train.spec.m;
        }
        let thetas = domain_theta_axis(&spec, config.field.theta_points);
        let field = compute_field(&spec, &thetas, &qualities, NegativeModel::Mirrored)?;
        written.push(out.write_with(&field_file_name(variant), |w| export_field(&field, w))?);
    }
    Ok(written)
}

pub fn run_gradcheck(config: &RunConfig, out: &RunDir) -> CliResult<GradcheckReport> {
    out.write_manifest("gradcheck", config)?;
    let report = gradcheck_suite(&config.gradcheck)?;
    out.write_text(GRADCHECK_FILE, &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub variant: Variant,
    pub mean_seconds: f64,
    /// Mean time relative to the reference variant.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub iterations: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub reference: Variant,
    pub entries: Vec<TimingEntry>,
}

impl TimingReport {
    pub fn ratio(&self, variant: Variant) -> Option<f64> {
        self.entries.iter().find(|e| e.variant == variant).map(|e| e.ratio)
    }
}

/// Times full training iterations (network and head, forward, backward and
/// update) on one fixed batch. Variants are interleaved within every round,
/// with a rotating order, so drift in machine load hits all of them alike.
pub fn measure_timing(config: &RunConfig) -> CliResult<TimingReport> {
    let t = &config.timing;
    let mut variants = t.variants.clone();
    if !variants.contains(&t.reference) {
        variants.push(t.reference);
    }
    let dataset = generate(&config.data)?;
    let batch: Vec<_> = dataset.train.iter().take(t.batch_size).cloned().collect();
    let inputs = SynthDataset::stack(&batch);
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let external: Vec<f64> = batch.iter().map(|s| s.true_quality).collect();

    let mut models = Vec::with_capacity(variants.len());
    for &v in &variants {
        let mut train_cfg = config.train.clone();
        train_cfg.spec = MarginSpec::new(v).with_scale(config.train.spec.s);
        let (net, head) = init_model(&train_cfg, dataset.config.ambient_dim, dataset.config.num_identities)?;
        let sgd = Sgd::new(&net, &head, train_cfg.momentum, train_cfg.weight_decay);
        models.push((net, head, sgd));
    }
    let lr = config.train.learning_rate * 1e-3;
    let mut totals = vec![0.0; variants.len()];
    for round in 0..t.warmup + t.iterations {
        for k in 0..variants.len() {
            let idx = (k + round) % variants.len();
            let (net, head, sgd) = &mut models[idx];
            let start = Instant::now();
            let emb = net.forward(inputs.view())?;
            let fwd = head.forward(emb.view(), &labels, Mode::Train, Some(&external))?;
            let hg = head.backward(&fwd)?;
            let ng = net.backward(hg.d_embeddings.view())?;
            sgd.step(net, &ng, head, &hg.d_weights, lr);
            let elapsed = start.elapsed().as_secs_f64();
            if round >= t.warmup {
                totals[idx] += elapsed;
            }
        }
    }
    let ref_idx = variants.iter().position(|&v| v == t.reference).expect("reference included");
    let ref_mean = totals[ref_idx] / t.iterations as f64;
    let entries = variants
        .iter()
        .zip(&totals)
        .map(|(&variant, &total)| {
            let mean_seconds = total / t.iterations as f64;
            TimingEntry {
                variant,
                mean_seconds,
                ratio: mean_seconds / ref_mean,
            }
        })
        .collect();
    Ok(TimingReport {
        iterations: t.iterations,
        warmup: t.warmup,
        batch_size: t.batch_size,
        reference: t.reference,
        entries,
    })
}

pub fn run_timing(config: &RunConfig, out: &RunDir) -> CliResult<TimingReport> {
    out.write_manifest("timing", config)?;
    let report = measure_timing(config)?;
    out.write_text(TIMING_FILE, &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(report)
}

pub const COMMANDS: [&str; 6] = ["train", "ablate", "gst-field", "gradcheck", "evaluate", "timing"];

/// Resolves configuration, prepares the output directory and dispatches.
/// Returns a one-line summary for the terminal.
pub fn execute(command: &str, config: RunConfig, out: &Path, overwrite: bool) -> CliResult<String> {
    if !COMMANDS.contains(&command) {
        return Err(Error::Config(format!("unknown command `{command}`")).into());
    }
    let config = config.resolve()?;
    if command == "ablate" && config.ablation_values.len() < 2 {
        return Err(Error::Config("an ablation needs at least two values".into()).into());
    }
    if command == "evaluate" && config.checkpoint.is_none() {
        return Err(Error::Config("evaluate needs eval.checkpoint".into()).into());
    }
    let dir = RunDir::create(out, overwrite)?;
    match command {
        "train" => {
            let a = run_train(&config, &dir)?;
            Ok(format!(
                "trained {} epochs: rank-1 {:.4}, LQ composite {:.4}, HQ composite {:.4}",
                a.outcome.log.len(),
                a.report.rank1,
                a.report.lq_composite,
                a.report.hq_composite
            ))
        }
        "evaluate" => {
            let r = run_evaluate(&config, &dir)?;
            Ok(format!("rank-1 {:.4}, LQ composite {:.4}", r.rank1, r.lq_composite))
        }
        "ablate" => {
            let rows = run_ablation(&config, &dir)?;
            Ok(rows
                .iter()
                .map(|r| format!("{}={}: HQ {:.4} LQ {:.4}", r.axis, r.value, r.hq_composite, r.lq_composite))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        "gst-field" => Ok(format!("wrote {} field tables", run_gst_field(&config, &dir)?.len())),
        "gradcheck" => {
            let report = run_gradcheck(&config, &dir)?;
            let mut lines: Vec<String> = report
                .variants
                .iter()
                .map(|v| {
                    format!(
                        "{:<18} {} dz {:.2e} dW {:.2e} gst {:.2e}",
                        v.variant.name(),
                        if v.passed { "PASS" } else { "FAIL" },
                        v.max_rel_error_embeddings,
                        v.max_rel_error_weights,
                        v.max_rel_error_gst
                    )
                })
                .collect();
            lines.push(format!("reductions {}", if report.reductions_passed { "PASS" } else { "FAIL" }));
            let summary = lines.join("\n");
            if report.passed {
                Ok(summary)
            } else {
                Err(CliError::ChecksFailed(summary))
            }
        }
        "timing" => {
            let r = run_timing(&config, &dir)?;
            Ok(r.entries
                .iter()
                .map(|e| format!("{:<18} {:.3} ms  x{:.4}", e.variant.name(), e.mean_seconds * 1e3, e.ratio))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        _ => unreachable!("checked above"),
    }
}
