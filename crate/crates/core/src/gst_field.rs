//! Gradient scaling term over a grid of (ground-truth angle, quality).
//!
//! `P_y` on the grid comes from a two-class surrogate: one negative class at
//! angle `π − θ`. This keeps every grid value a pure function of `(θ, ẑ)`.

use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{self, MarginSpec};

pub const DEFAULT_THETA_POINTS: usize = 181;
pub const DEFAULT_QUALITY_POINTS: usize = 41;

/// Where the negative class sits relative to the ground-truth angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum NegativeModel {
    /// A single negative class at `π − θ`.
    #[default]
    Mirrored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub spec: MarginSpec,
    pub theta_axis: Vec<f64>,
    pub quality_axis: Vec<f64>,
    /// `|g|`, indexed `[theta, quality]`.
    pub values: Array2<f64>,
    /// Signed `g`, same layout.
    pub signed: Array2<f64>,
    pub prob: Array2<f64>,
}

/// `n` evenly spaced points strictly inside `(0, π)`.
pub fn theta_axis(n: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    (0..n).map(|k| pi * (k as f64 + 0.5) / n as f64).collect()
}

/// Like [`theta_axis`], but confined to the angles where `spec` is defined
/// (`θ < π/m` for SphereFace with `m > 1`).
pub fn domain_theta_axis(spec: &MarginSpec, n: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let limit = match spec.variant {
        margin::Variant::SphereFace if spec.m > 1.0 => pi / spec.m,
        _ => pi,
    };
    theta_axis(n).into_iter().map(|t| t * limit / pi).collect()
}

/// `n` evenly spaced points covering `[−1, 1]`.
pub fn quality_axis(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect()
}

fn strictly_increasing(axis: &[f64]) -> bool {
    axis.windows(2).all(|w| w[0] < w[1])
}

/// Ground-truth probability and GST at one grid point.
pub fn point_gst(spec: &MarginSpec, theta: f64, quality: f64, model: NegativeModel) -> Result<(f64, f64)> {
    let NegativeModel::Mirrored = model;
    let q = spec.variant.uses_quality().then_some(quality);
    let cos_y = theta.cos();
    let cos_neg = (std::f64::consts::PI - theta).cos();
    let pos = margin::margin_logit(spec, cos_y, q)?;
    let neg = margin::negative_logit(spec, cos_neg, pos)?;
    let p_y = margin::softmax_probs(&[pos, neg])?[0];
    let report = margin::gst(spec, cos_y, p_y, q)?;
    Ok((p_y, report.g))
}

pub fn compute_field(
    spec: &MarginSpec,
    theta_axis: &[f64],
    quality_axis: &[f64],
    model: NegativeModel,
) -> Result<FieldGrid> {
    let pi = std::f64::consts::PI;
    if theta_axis.is_empty() || quality_axis.is_empty() {
        return Err(Error::Empty("field axis"));
    }
    if !strictly_increasing(theta_axis) || !strictly_increasing(quality_axis) {
        return Err(Error::Config("field axes must be strictly increasing".into()));
    }
    if theta_axis[0] <= 0.0 || theta_axis[theta_axis.len() - 1] >= pi {
        return Err(Error::Domain {
            what: "theta axis",
            value: theta_axis[0],
        });
    }
    if quality_axis[0] < -1.0 || quality_axis[quality_axis.len() - 1] > 1.0 {
        return Err(Error::Domain {
            what: "quality axis",
            value: quality_axis[0],
        });
    }
    let shape = (theta_axis.len(), quality_axis.len());
    let mut signed = Array2::zeros(shape);
    let mut prob = Array2::zeros(shape);
    for (i, &theta) in theta_axis.iter().enumerate() {
        for (j, &q) in quality_axis.iter().enumerate() {
            let (p, g) = point_gst(spec, theta, q, model)?;
            signed[[i, j]] = g;
            prob[[i, j]] = p;
        }
    }
    Ok(FieldGrid {
        spec: *spec,
        theta_axis: theta_axis.to_vec(),
        quality_axis: quality_axis.to_vec(),
        values: signed.mapv(f64::abs),
        signed,
        prob,
    })
}

const HEADER: &str = "theta,quality,gst";

/// Writes the field as CSV: one `#` metadata line, a column header, then one
/// row per grid point, θ-major.
pub fn export_field<W: Write>(field: &FieldGrid, mut out: W) -> Result<()> {
    let spec = &field.spec;
    writeln!(
        out,
        "# variant={} m={} s={} t={} theta_points={} quality_points={}",
        spec.variant,
        spec.m,
        spec.s,
        spec.t,
        field.theta_axis.len(),
        field.quality_axis.len()
    )?;
    writeln!(out, "{HEADER}")?;
    for (i, theta) in field.theta_axis.iter().enumerate() {
        for (j, q) in field.quality_axis.iter().enumerate() {
            writeln!(out, "{theta},{q},{}", field.values[[i, j]])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses the rows written by [`export_field`] back into `(θ, quality, |g|)`.
pub fn parse_field<R: BufRead>(input: R) -> Result<Vec<(f64, f64, f64)>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in input.lines() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            if line != HEADER {
                return Err(Error::Parse(format!("unexpected field header `{line}`")));
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("expected 3 columns, got `{line}`")));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        rows.push((parse(cols[0])?, parse(cols[1])?, parse(cols[2])?));
    }
    Ok(rows)
}
