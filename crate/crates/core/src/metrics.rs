//! Photometric error, parameter deltas, correlation, and evaluation reports.
//!
//! "Photometric error" here is the mean absolute discrepancy between the
//! corrected intensities at both ends of each correspondence, times 100.
//! Only ratios and orderings of these numbers are meaningful.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{calibrate_pixel, ParamChain, RelativeParams};
use crate::spatial::SpatialField;
use crate::temporal::CorrespondenceSet;

/// Two-sided 95% standard normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.0, 0.05, 0.10, 0.15];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: no correspondences")]
    Empty,
    #[error("metric undefined: zero variance")]
    ZeroVariance,
    #[error("metric undefined: need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("frame {0} has no parameters in the chain")]
    MissingFrame(usize),
    #[error("temporal+spatial mode needs a spatial field")]
    MissingField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    Uncalibrated,
    Temporal,
    TemporalSpatial,
}

/// Mean of `100 |corrected_to - corrected_from|` over the set's pairs.
pub fn photometric_error(
    set: &CorrespondenceSet,
    chain: &ParamChain,
    field: Option<&SpatialField>,
    mode: ErrorMode,
) -> Result<f64, MetricError> {
    let (sum, n) = error_sum(set, chain, field, mode)?;
    Ok(sum / n as f64)
}

fn error_sum(
    set: &CorrespondenceSet,
    chain: &ParamChain,
    field: Option<&SpatialField>,
    mode: ErrorMode,
) -> Result<(f64, usize), MetricError> {
    if set.is_empty() {
        return Err(MetricError::Empty);
    }
    let identity = RelativeParams::identity(chain.reference());
    let (p_from, p_to) = match mode {
        ErrorMode::Uncalibrated => (identity, identity),
        _ => (
            *chain.get(set.from_frame).ok_or(MetricError::MissingFrame(set.from_frame))?,
            *chain.get(set.to_frame).ok_or(MetricError::MissingFrame(set.to_frame))?,
        ),
    };
    let sampler = match mode {
        ErrorMode::TemporalSpatial => Some(field.ok_or(MetricError::MissingField)?.bias_sampler()),
        _ => None,
    };
    let sum = set
        .pairs
        .iter()
        .map(|c| {
            let (r_from, r_to) = sampler
                .as_ref()
                .map_or((0.0, 0.0), |s| (s.at(c.p_from[0], c.p_from[1]), s.at(c.p_to[0], c.p_to[1])));
            let from = calibrate_pixel(c.i_from, &p_from, r_from);
            let to = calibrate_pixel(c.i_to, &p_to, r_to);
            100.0 * (to - from).abs()
        })
        .sum();
    Ok((sum, set.len()))
}

/// Pooled error over several sets (each pair weighs equally).
pub fn pooled_error(
    sets: &[CorrespondenceSet],
    chain: &ParamChain,
    field: Option<&SpatialField>,
    mode: ErrorMode,
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut count = 0;
    for s in sets.iter().filter(|s| !s.is_empty()) {
        let (sum, n) = error_sum(s, chain, field, mode)?;
        total += sum;
        count += n;
    }
    if count == 0 {
        return Err(MetricError::Empty);
    }
    Ok(total / count as f64)
}

/// Euclidean distance between the chain's `(c, b)` at frames `t - 1` and `t`.
pub fn photometric_delta(chain: &ParamChain, t: usize) -> Result<f64, MetricError> {
    if t == 0 {
        return Err(MetricError::MissingFrame(0));
    }
    let prev = chain.get(t - 1).ok_or(MetricError::MissingFrame(t - 1))?;
    let cur = chain.get(t).ok_or(MetricError::MissingFrame(t))?;
    Ok(delta_between(prev, cur))
}

pub fn delta_between(p: &RelativeParams, q: &RelativeParams) -> f64 {
    (p.c() - q.c()).hypot(p.b - q.b)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFew {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 95% confidence interval of a correlation `r` from `n` samples (Fisher z).
pub fn pearson_ci(r: f64, n: usize) -> Result<(f64, f64), MetricError> {
    if n < 4 {
        return Err(MetricError::TooFew { needed: 4, got: n });
    }
    if r.abs() >= 1.0 {
        return Ok((r, r));
    }
    let z = r.atanh();
    let se = 1.0 / ((n - 3) as f64).sqrt();
    Ok(((z - Z_95 * se).tanh(), (z + Z_95 * se).tanh()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub threshold: f64,
    /// `None` when fewer than two samples survive or a series is constant.
    pub rho: Option<f64>,
    pub n: usize,
    pub ci: Option<(f64, f64)>,
}

/// Pearson correlation of `improvements` against `deltas` restricted to
/// samples with `delta >= threshold`, for each threshold.
pub fn threshold_sweep(deltas: &[f64], improvements: &[f64], thresholds: &[f64]) -> Result<Vec<SweepEntry>, MetricError> {
    if deltas.len() != improvements.len() {
        return Err(MetricError::LengthMismatch(deltas.len(), improvements.len()));
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = deltas
                .iter()
                .zip(improvements)
                .filter(|(d, _)| **d >= threshold)
                .map(|(d, i)| (*d, *i))
                .unzip();
            let rho = pearson(&xs, &ys).ok();
            SweepEntry {
                threshold,
                rho,
                n: xs.len(),
                ci: rho.and_then(|r| pearson_ci(r, xs.len()).ok()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub pairs: usize,
    pub uncalibrated: f64,
    pub temporal: f64,
    pub temporal_spatial: Option<f64>,
    /// Change of `(c, b)` from the previous frame.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub frames: usize,
    pub a_rmse: f64,
    pub b_rmse: f64,
    /// Mean-aligned per-cell RMSE of the bias over solved cells.
    pub bias_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub pairs: usize,
    pub mean_uncalibrated: f64,
    pub mean_temporal: f64,
    pub mean_temporal_spatial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub sweep: Vec<SweepEntry>,
    pub summary: Summary,
    pub recovery: Option<Recovery>,
}

/// Reference values for parameter-recovery columns.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub chain: &'a ParamChain,
    /// Per-cell bias in chain units, on the evaluated field's grid.
    pub cell_bias: Option<&'a [f64]>,
}

/// Evaluates a calibration over correspondence sets grouped by target frame.
/// Frames without sets are skipped. Means are pair-weighted.
pub fn evaluate(
    sets: &[CorrespondenceSet],
    chain: &ParamChain,
    field: Option<&SpatialField>,
    reference: Option<Reference<'_>>,
) -> Result<EvalReport, MetricError> {
    let mut by_frame: std::collections::BTreeMap<usize, Vec<&CorrespondenceSet>> = Default::default();
    for s in sets.iter().filter(|s| !s.is_empty()) {
        by_frame.entry(s.to_frame).or_default().push(s);
    }
    let mut frames = Vec::new();
    let (mut su, mut st, mut sts, mut pairs) = (0.0, 0.0, 0.0, 0usize);
    for (&frame, group) in &by_frame {
        let owned: Vec<CorrespondenceSet> = group.iter().map(|s| (*s).clone()).collect();
        let n: usize = owned.iter().map(CorrespondenceSet::len).sum();
        let u = pooled_error(&owned, chain, None, ErrorMode::Uncalibrated)?;
        let t = pooled_error(&owned, chain, None, ErrorMode::Temporal)?;
        let ts = field
            .map(|f| pooled_error(&owned, chain, Some(f), ErrorMode::TemporalSpatial))
            .transpose()?;
        su += u * n as f64;
        st += t * n as f64;
        sts += ts.unwrap_or(0.0) * n as f64;
        pairs += n;
        frames.push(FrameEval {
            frame,
            pairs: n,
            uncalibrated: u,
            temporal: t,
            temporal_spatial: ts,
            delta: photometric_delta(chain, frame).ok(),
        });
    }
    if pairs == 0 {
        return Err(MetricError::Empty);
    }
    let (deltas, improvements): (Vec<f64>, Vec<f64>) = frames
        .iter()
        .filter_map(|f| f.delta.map(|d| (d, f.uncalibrated - f.temporal)))
        .unzip();
    let sweep = threshold_sweep(&deltas, &improvements, &DEFAULT_THRESHOLDS)?;
    let summary = Summary {
        frames: frames.len(),
        pairs,
        mean_uncalibrated: su / pairs as f64,
        mean_temporal: st / pairs as f64,
        mean_temporal_spatial: field.map(|_| sts / pairs as f64),
    };
    let recovery = reference.map(|r| recovery(chain, field, r));
    Ok(EvalReport {
        frames,
        sweep,
        summary,
        recovery,
    })
}

fn recovery(chain: &ParamChain, field: Option<&SpatialField>, reference: Reference<'_>) -> Recovery {
    let (mut ea, mut eb, mut n) = (0.0, 0.0, 0usize);
    for e in chain.entries() {
        let frame = e.params.to;
        if let Some(t) = reference.chain.get(frame) {
            ea += (e.params.a - t.a).powi(2);
            eb += (e.params.b - t.b).powi(2);
            n += 1;
        }
    }
    let bias_rmse = match (field, reference.cell_bias) {
        (Some(f), Some(truth)) if truth.len() == f.values.len() => {
            let pairs: Vec<(f64, f64)> = f
                .values
                .iter()
                .zip(truth)
                .filter_map(|(v, t)| v.map(|v| (v, *t)))
                .collect();
            aligned_rmse(&pairs)
        }
        _ => None,
    };
    Recovery {
        frames: n,
        a_rmse: (ea / n.max(1) as f64).sqrt(),
        b_rmse: (eb / n.max(1) as f64).sqrt(),
        bias_rmse,
    }
}

/// RMSE between `(estimate, truth)` pairs after removing each side's mean.
pub fn aligned_rmse(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let me = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mt = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sse: f64 = pairs.iter().map(|(e, t)| ((e - me) - (t - mt)).powi(2)).sum();
    Some((sse / n).sqrt())
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"))
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }

    /// Per-frame rows: `frame,pairs,uncalibrated,temporal,temporal_spatial,delta`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["frame", "pairs", "uncalibrated", "temporal", "temporal_spatial", "delta"])?;
        for f in &self.frames {
            out.write_record([
                f.frame.to_string(),
                f.pairs.to_string(),
                f.uncalibrated.to_string(),
                f.temporal.to_string(),
                f.temporal_spatial.map_or(String::new(), |v| v.to_string()),
                f.delta.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aligned plain-text summary.
    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "frames evaluated  {:>10}", s.frames);
        let _ = writeln!(out, "correspondences   {:>10}", s.pairs);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<20}{:>12}", "mode", "error %");
        let _ = writeln!(out, "{:<20}{:>12.4}", "uncalibrated", s.mean_uncalibrated);
        let _ = writeln!(out, "{:<20}{:>12.4}", "temporal", s.mean_temporal);
        let _ = writeln!(out, "{:<20}{:>12}", "temporal+spatial", fmt_opt(s.mean_temporal_spatial, 4));
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<12}{:>10}{:>8}{:>22}", "delta >=", "rho", "n", "95% ci");
        for e in &self.sweep {
            let ci = e.ci.map_or("-".to_string(), |(lo, hi)| format!("[{lo:.3}, {hi:.3}]"));
            let _ = writeln!(out, "{:<12.2}{:>10}{:>8}{:>22}", e.threshold, fmt_opt(e.rho, 4), e.n, ci);
        }
        let _ = writeln!(out);
        match &self.recovery {
            Some(r) => {
                let _ = writeln!(out, "parameter recovery over {} frames", r.frames);
                let _ = writeln!(out, "{:<20}{:>14.3e}", "a rmse", r.a_rmse);
                let _ = writeln!(out, "{:<20}{:>14.3e}", "b rmse", r.b_rmse);
                let bias = r.bias_rmse.map_or("-".to_string(), |v| format!("{v:.3e}"));
                let _ = writeln!(out, "{:<20}{:>14}", "bias rmse", bias);
            }
            None => {
                let _ = writeln!(out, "parameter recovery  absent (no ground truth)");
            }
        }
        out
    }
}
