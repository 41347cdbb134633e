//! Corner detection, pyramidal Lucas-Kanade tracking, and the correspondence
//! CSV format used to exchange matches with external trackers.
//!
//! Every comparison window is normalized to zero mean and unit variance, so
//! tracking is insensitive to the global gain/offset changes the calibration
//! is trying to estimate.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{bilinear, Frame};
use crate::temporal::{Correspondence, CorrespondenceSet};

/// Sets older than this many frames are not produced by [`FeatureTracker`].
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("invalid tracker config: {0}")]
    InvalidConfig(&'static str),
    #[error("frames differ in size: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("correspondence csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub max_features: usize,
    pub pyramid_levels: usize,
    pub window_radius: usize,
    /// Minimum smaller eigenvalue of the structure tensor for a corner.
    pub min_eigen_threshold: f64,
    /// Tracks whose final window RMS difference exceeds this are dropped.
    pub max_track_error: f64,
    /// Side length in pixels of the occupancy cells; at most one feature per cell.
    pub grid_occupancy: usize,
    pub max_iterations: usize,
    /// Normalize windows to zero mean and unit variance before comparing.
    pub normalize: bool,
    /// Frames a track may span before it is cut.
    pub track_window: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_features: 400,
            pyramid_levels: 3,
            window_radius: 7,
            min_eigen_threshold: 1e-4,
            max_track_error: 0.05,
            grid_occupancy: 8,
            max_iterations: 30,
            normalize: true,
            track_window: DEFAULT_WINDOW,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.pyramid_levels < 1 {
            return Err(TrackerError::InvalidConfig("pyramid_levels must be at least 1"));
        }
        if self.window_radius < 2 {
            return Err(TrackerError::InvalidConfig("window_radius must be at least 2"));
        }
        if self.grid_occupancy == 0 {
            return Err(TrackerError::InvalidConfig("grid_occupancy must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(TrackerError::InvalidConfig("max_iterations must be positive"));
        }
        if self.track_window == 0 {
            return Err(TrackerError::InvalidConfig("track_window must be positive"));
        }
        if !(self.max_track_error > 0.0) || !(self.min_eigen_threshold >= 0.0) {
            return Err(TrackerError::InvalidConfig("thresholds must be positive"));
        }
        Ok(())
    }
}

/// Single-channel float image with central-difference gradients.
#[derive(Debug, Clone)]
struct Level {
    width: usize,
    height: usize,
    data: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl Level {
    fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        let mut gx = vec![0.0; data.len()];
        let mut gy = vec![0.0; data.len()];
        for y in 0..height {
            for x in 0..width {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(width - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(height - 1);
                let i = y * width + x;
                if xr > xl {
                    gx[i] = (data[y * width + xr] - data[y * width + xl]) / (xr - xl) as f64;
                }
                if yd > yu {
                    gy[i] = (data[yd * width + x] - data[yu * width + x]) / (yd - yu) as f64;
                }
            }
        }
        Self {
            width,
            height,
            data,
            gx,
            gy,
        }
    }

    /// Binomial blur followed by keeping even pixels; pixel `x` of the result
    /// sits at `2x` of the source.
    fn downsample(&self) -> Option<Self> {
        let (w, h) = (self.width.div_ceil(2), self.height.div_ceil(2));
        if w < 2 || h < 2 {
            return None;
        }
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let at = |x: isize, y: isize| {
            let x = x.clamp(0, self.width as isize - 1) as usize;
            let y = y.clamp(0, self.height as isize - 1) as usize;
            self.data[y * self.width + x]
        };
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (2 * x as isize, 2 * y as isize);
                let mut acc = 0.0;
                for (j, ky) in K.iter().enumerate() {
                    for (i, kx) in K.iter().enumerate() {
                        acc += kx * ky * at(cx + i as isize - 2, cy + j as isize - 2);
                    }
                }
                out.push(acc);
            }
        }
        Some(Self::new(w, h, out))
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    fn sample_grad(&self, x: f64, y: f64) -> (f64, f64) {
        (
            bilinear(&self.gx, self.width, self.height, x, y),
            bilinear(&self.gy, self.width, self.height, x, y),
        )
    }
}

/// Image pyramid; level 0 is full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<Level>,
}

impl Pyramid {
    pub fn build(frame: &Frame, levels: usize) -> Self {
        let mut out = vec![Level::new(frame.width(), frame.height(), frame.data().to_vec())];
        while out.len() < levels {
            match out.last().and_then(Level::downsample) {
                Some(l) => out.push(l),
                None => break,
            }
        }
        Self { levels: out }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Smaller eigenvalue of the gradient structure tensor summed over a 5x5 window.
fn min_eigen_map(level: &Level) -> Vec<f64> {
    let (w, h) = (level.width, level.height);
    let mut out = vec![0.0; w * h];
    const R: usize = 2;
    if w <= 2 * R || h <= 2 * R {
        return out;
    }
    for y in R..h - R {
        for x in R..w - R {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for yy in y - R..=y + R {
                for xx in x - R..=x + R {
                    let i = yy * w + xx;
                    let (gx, gy) = (level.gx[i], level.gy[i]);
                    sxx += gx * gx;
                    sxy += gx * gy;
                    syy += gy * gy;
                }
            }
            let tr = 0.5 * (sxx + syy);
            let det = sxx * syy - sxy * sxy;
            out[y * w + x] = tr - (tr * tr - det).max(0.0).sqrt();
        }
    }
    out
}

/// Shi-Tomasi corners: 3x3 local maxima above the threshold, refined to
/// subpixel position, at most one per occupancy cell, strongest first, capped at `max_features`. Points closer
/// than `window_radius + 1` to the border are skipped so tracking windows fit.
pub fn detect_features(frame: &Frame, cfg: &TrackerConfig) -> Vec<[f64; 2]> {
    detect_excluding(frame, cfg, &[], cfg.max_features)
}

fn detect_excluding(frame: &Frame, cfg: &TrackerConfig, occupied: &[[f64; 2]], budget: usize) -> Vec<[f64; 2]> {
    let level = Level::new(frame.width(), frame.height(), frame.data().to_vec());
    let score = min_eigen_map(&level);
    let (w, h) = (level.width, level.height);
    let margin = cfg.window_radius + 1;
    if budget == 0 || w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let cell = cfg.grid_occupancy;
    let cells_x = w.div_ceil(cell);
    let cells_y = h.div_ceil(cell);
    let cell_of = |p: [f64; 2]| {
        let cx = (p[0].max(0.0) as usize / cell).min(cells_x - 1);
        let cy = (p[1].max(0.0) as usize / cell).min(cells_y - 1);
        cy * cells_x + cx
    };
    let (lo_x, lo_y) = (margin as f64, margin as f64);
    let (hi_x, hi_y) = ((w - 1 - margin) as f64, (h - 1 - margin) as f64);
    let mut best: Vec<Option<(f64, usize, [f64; 2])>> = vec![None; cells_x * cells_y];
    let mut taken = vec![false; cells_x * cells_y];
    for p in occupied {
        taken[cell_of(*p)] = true;
    }
    for y in margin..h - margin {
        for x in margin..w - margin {
            let s = score[y * w + x];
            if s <= cfg.min_eigen_threshold {
                continue;
            }
            let is_max = (y - 1..=y + 1)
                .flat_map(|yy| (x - 1..=x + 1).map(move |xx| (xx, yy)))
                .all(|(xx, yy)| {
                    let o = score[yy * w + xx];
                    // strict for earlier neighbours so plateaus keep one pixel
                    o < s || (o == s && (yy, xx) >= (y, x))
                });
            if !is_max {
                continue;
            }
            let q = refine_corner(&level, [x as f64, y as f64]);
            if q[0] < lo_x || q[1] < lo_y || q[0] > hi_x || q[1] > hi_y {
                continue;
            }
            let c = cell_of(q);
            if taken[c] {
                continue;
            }
            if best[c].is_none_or(|(bs, _, _)| s > bs) {
                best[c] = Some((s, y * w + x, q));
            }
        }
    }
    let mut found: Vec<(f64, usize, [f64; 2])> = best.into_iter().flatten().collect();
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.truncate(budget);
    found.into_iter().map(|(_, _, q)| q).collect()
}

/// Subpixel corner position: the point `q` minimizing
/// `sum (g(p) . (q - p))^2` over a small window, i.e. where the edge lines
/// through the window meet. Falls back to the integer position when the fit
/// is ill-posed or moves more than two pixels.
fn refine_corner(level: &Level, p: [f64; 2]) -> [f64; 2] {
    const R: isize = 3;
    let (w, h) = (level.width as isize, level.height as isize);
    let (px, py) = (p[0] as isize, p[1] as isize);
    let (mut gxx, mut gxy, mut gyy, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in (py - R).max(0)..=(py + R).min(h - 1) {
        for x in (px - R).max(0)..=(px + R).min(w - 1) {
            let i = (y * w + x) as usize;
            let (gx, gy) = (level.gx[i], level.gy[i]);
            let (xf, yf) = (x as f64, y as f64);
            gxx += gx * gx;
            gxy += gx * gy;
            gyy += gy * gy;
            bx += gx * gx * xf + gx * gy * yf;
            by += gx * gy * xf + gy * gy * yf;
        }
    }
    let det = gxx * gyy - gxy * gxy;
    if det <= 1e-12 {
        return p;
    }
    let q = [(gyy * bx - gxy * by) / det, (gxx * by - gxy * bx) / det];
    if (q[0] - p[0]).abs() > 2.0 || (q[1] - p[1]).abs() > 2.0 {
        return p;
    }
    q
}

/// Result of tracking one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrackStats {
    pub requested: usize,
    pub tracked: usize,
    pub dropped_bounds: usize,
    pub dropped_error: usize,
    pub dropped_degenerate: usize,
}

enum Drop {
    Bounds,
    Error,
    Degenerate,
}

fn window_offsets(r: usize) -> Vec<(f64, f64)> {
    let r = r as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx as f64, dy as f64)))
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn track_point(prev: &Pyramid, next: &Pyramid, p: [f64; 2], cfg: &TrackerConfig, offsets: &[(f64, f64)]) -> Result<TrackedPoint, Drop> {
    let depth = prev.depth().min(next.depth());
    let mut d = [0.0f64; 2];
    let mut tmpl = vec![0.0; offsets.len()];
    let mut grads = vec![(0.0, 0.0); offsets.len()];
    let mut cur = vec![0.0; offsets.len()];
    for l in (0..depth).rev() {
        let scale = (1u64 << l) as f64;
        let (lp, ln) = (&prev.levels[l], &next.levels[l]);
        let px = p[0] / scale;
        let py = p[1] / scale;
        for (k, &(ox, oy)) in offsets.iter().enumerate() {
            tmpl[k] = lp.sample(px + ox, py + oy);
            grads[k] = lp.sample_grad(px + ox, py + oy);
        }
        let (t_mean, t_std) = mean_std(&tmpl);
        if t_std < 1e-9 {
            return Err(Drop::Degenerate);
        }
        let (t_mean, t_norm) = if cfg.normalize { (t_mean, t_std) } else { (0.0, 1.0) };
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for &(gx, gy) in &grads {
            gxx += gx * gx;
            gxy += gx * gy;
            gyy += gy * gy;
        }
        let det = gxx * gyy - gxy * gxy;
        if det <= 1e-12 * (gxx + gyy).powi(2).max(1e-30) {
            return Err(Drop::Degenerate);
        }
        for _ in 0..cfg.max_iterations {
            let qx = px + d[0];
            let qy = py + d[1];
            for (k, &(ox, oy)) in offsets.iter().enumerate() {
                cur[k] = ln.sample(qx + ox, qy + oy);
            }
            let (c_mean, c_std) = if cfg.normalize {
                let (m, s) = mean_std(&cur);
                if s < 1e-9 {
                    return Err(Drop::Degenerate);
                }
                (m, s)
            } else {
                (0.0, 1.0)
            };
            // residual expressed in template intensity units
            let (mut bx, mut by) = (0.0, 0.0);
            for k in 0..offsets.len() {
                let j = (cur[k] - c_mean) / c_std * t_norm + t_mean;
                let e = tmpl[k] - j;
                bx += grads[k].0 * e;
                by += grads[k].1 * e;
            }
            let sx = (gyy * bx - gxy * by) / det;
            let sy = (gxx * by - gxy * bx) / det;
            d[0] += sx;
            d[1] += sy;
            if !d[0].is_finite() || !d[1].is_finite() {
                return Err(Drop::Degenerate);
            }
            if sx * sx + sy * sy < 1e-8 {
                break;
            }
        }
        if l > 0 {
            d[0] *= 2.0;
            d[1] *= 2.0;
        }
    }
    let to = [p[0] + d[0], p[1] + d[1]];
    let r = cfg.window_radius as f64;
    let l0 = &next.levels[0];
    if to[0] - r < 0.0 || to[1] - r < 0.0 || to[0] + r > (l0.width - 1) as f64 || to[1] + r > (l0.height - 1) as f64 {
        return Err(Drop::Bounds);
    }
    // error from a final evaluation at the converged position
    let lp = &prev.levels[0];
    for (k, &(ox, oy)) in offsets.iter().enumerate() {
        tmpl[k] = lp.sample(p[0] + ox, p[1] + oy);
        cur[k] = l0.sample(to[0] + ox, to[1] + oy);
    }
    let (t_mean, t_std) = mean_std(&tmpl);
    let (c_mean, c_std) = mean_std(&cur);
    if cfg.normalize && c_std < 1e-9 {
        return Err(Drop::Degenerate);
    }
    let sse: f64 = tmpl
        .iter()
        .zip(&cur)
        .map(|(&t, &c)| {
            let j = if cfg.normalize { (c - c_mean) / c_std * t_std + t_mean } else { c };
            (t - j).powi(2)
        })
        .sum();
    let error = (sse / offsets.len() as f64).sqrt();
    if error > cfg.max_track_error {
        return Err(Drop::Error);
    }
    Ok(TrackedPoint { from: p, to, error })
}

/// Tracks `points` from `prev` to `next` on prebuilt pyramids. The output
/// keeps input order; dropped points are counted in the stats.
pub fn track_pyramids(prev: &Pyramid, next: &Pyramid, points: &[[f64; 2]], cfg: &TrackerConfig) -> (Vec<Option<TrackedPoint>>, TrackStats) {
    let offsets = window_offsets(cfg.window_radius);
    let results: Vec<Result<TrackedPoint, Drop>> = points
        .par_iter()
        .map(|&p| track_point(prev, next, p, cfg, &offsets))
        .collect();
    let mut stats = TrackStats {
        requested: points.len(),
        ..TrackStats::default()
    };
    let out = results
        .into_iter()
        .map(|r| match r {
            Ok(t) => {
                stats.tracked += 1;
                Some(t)
            }
            Err(Drop::Bounds) => {
                stats.dropped_bounds += 1;
                None
            }
            Err(Drop::Error) => {
                stats.dropped_error += 1;
                None
            }
            Err(Drop::Degenerate) => {
                stats.dropped_degenerate += 1;
                None
            }
        })
        .collect();
    (out, stats)
}

/// Tracks `points` from `prev` into `next` and samples intensities at both ends.
pub fn track(prev: &Frame, next: &Frame, points: &[[f64; 2]], cfg: &TrackerConfig) -> Result<(CorrespondenceSet, TrackStats), TrackerError> {
    cfg.validate()?;
    check_sizes(prev, next)?;
    let pp = Pyramid::build(prev, cfg.pyramid_levels);
    let np = Pyramid::build(next, cfg.pyramid_levels);
    let (tracked, stats) = track_pyramids(&pp, &np, points, cfg);
    let pairs = tracked
        .into_iter()
        .flatten()
        .map(|t| sample_pair(prev, next, t.from, t.to))
        .collect();
    Ok((CorrespondenceSet::new(prev.index(), next.index(), pairs), stats))
}

fn check_sizes(a: &Frame, b: &Frame) -> Result<(), TrackerError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(TrackerError::SizeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

fn sample_pair(from: &Frame, to: &Frame, p: [f64; 2], q: [f64; 2]) -> Correspondence {
    let i_from = bilinear(from.data(), from.width(), from.height(), p[0], p[1]);
    let i_to = bilinear(to.data(), to.width(), to.height(), q[0], q[1]);
    Correspondence::new(i_from, i_to, p, q)
}

#[derive(Debug, Clone)]
struct Track {
    /// `(frame position in history, pixel)`, oldest first.
    history: Vec<(usize, [f64; 2])>,
}

/// Streaming tracker: each new frame is matched against the last
/// `track_window` frames through tracks that are extended frame by frame.
/// Features are re-detected every frame in unoccupied cells.
#[derive(Debug)]
pub struct FeatureTracker {
    cfg: TrackerConfig,
    frames: Vec<Frame>,
    prev_pyramid: Option<Pyramid>,
    tracks: Vec<Track>,
    pub last_stats: TrackStats,
}

impl FeatureTracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            frames: Vec::new(),
            prev_pyramid: None,
            tracks: Vec::new(),
            last_stats: TrackStats::default(),
        })
    }

    /// Adds the next frame and returns one correspondence set per earlier
    /// frame in the window that shares tracks with it, oldest first.
    pub fn advance(&mut self, frame: &Frame) -> Result<Vec<CorrespondenceSet>, TrackerError> {
        if let Some(prev) = self.frames.last() {
            check_sizes(prev, frame)?;
        }
        let pyr = Pyramid::build(frame, self.cfg.pyramid_levels);
        let mut sets = Vec::new();
        if let Some(prev_pyr) = &self.prev_pyramid {
            let heads: Vec<[f64; 2]> = self.tracks.iter().map(|t| t.history.last().unwrap().1).collect();
            let (tracked, stats) = track_pyramids(prev_pyr, &pyr, &heads, &self.cfg);
            self.last_stats = stats;
            let new_pos = self.frames.len();
            let mut kept = Vec::with_capacity(self.tracks.len());
            for (mut t, res) in std::mem::take(&mut self.tracks).into_iter().zip(tracked) {
                if let Some(tp) = res {
                    t.history.push((new_pos, tp.to));
                    kept.push(t);
                }
            }
            // history positions inside the window are new_pos - track_window ..
            let oldest = new_pos.saturating_sub(self.cfg.track_window);
            let mut by_from: BTreeMap<usize, Vec<Correspondence>> = BTreeMap::new();
            for t in &mut kept {
                t.history.retain(|(pos, _)| *pos >= oldest);
                let (_, q) = *t.history.last().unwrap();
                for &(pos, p) in &t.history[..t.history.len() - 1] {
                    by_from
                        .entry(pos)
                        .or_default()
                        .push(sample_pair(&self.frames[pos], frame, p, q));
                }
            }
            self.tracks = kept;
            for (pos, pairs) in by_from {
                sets.push(CorrespondenceSet::new(self.frames[pos].index(), frame.index(), pairs));
            }
        }
        let occupied: Vec<[f64; 2]> = self.tracks.iter().map(|t| t.history.last().unwrap().1).collect();
        let budget = self.cfg.max_features.saturating_sub(self.tracks.len());
        let pos = self.frames.len();
        for p in detect_excluding(frame, &self.cfg, &occupied, budget) {
            self.tracks.push(Track { history: vec![(pos, p)] });
        }
        self.frames.push(frame.clone());
        // frames older than the window are never read again
        let keep_from = self.frames.len().saturating_sub(self.cfg.track_window + 1);
        for f in &mut self.frames[..keep_from] {
            if f.width() > 1 {
                *f = Frame::new(f.index(), 1, 1, vec![0.0]).expect("placeholder frame");
            }
        }
        self.prev_pyramid = Some(pyr);
        Ok(sets)
    }

    pub fn active_tracks(&self) -> usize {
        self.tracks.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    from_frame: usize,
    to_frame: usize,
    x_from: f64,
    y_from: f64,
    x_to: f64,
    y_to: f64,
    i_from: Option<f64>,
    i_to: Option<f64>,
}

/// Parses the correspondence CSV, validates every row, and groups rows by
/// frame pair. Sets are ordered by `(to_frame, from_frame)`; rows keep file
/// order. Missing intensities are stored as NaN; see [`resample_missing`].
pub fn ingest_correspondences<R: Read>(reader: R, bounds: Option<(usize, usize)>) -> Result<Vec<CorrespondenceSet>, TrackerError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut groups: BTreeMap<(usize, usize), Vec<Correspondence>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: Row = rec.deserialize(Some(&headers)).map_err(|e| TrackerError::Row {
            line,
            message: e.to_string(),
        })?;
        let bad = |message: String| TrackerError::Row { line, message };
        if row.from_frame >= row.to_frame {
            return Err(bad(format!(
                "from_frame {} must precede to_frame {}",
                row.from_frame, row.to_frame
            )));
        }
        for (name, v) in [("x_from", row.x_from), ("y_from", row.y_from), ("x_to", row.x_to), ("y_to", row.y_to)] {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("{name} = {v} is outside the image")));
            }
        }
        if let Some((w, h)) = bounds {
            let (mx, my) = ((w - 1) as f64, (h - 1) as f64);
            if row.x_from > mx || row.x_to > mx {
                return Err(bad(format!("x coordinate beyond image width {w}")));
            }
            if row.y_from > my || row.y_to > my {
                return Err(bad(format!("y coordinate beyond image height {h}")));
            }
        }
        for (name, v) in [("i_from", row.i_from), ("i_to", row.i_to)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        groups.entry((row.to_frame, row.from_frame)).or_default().push(Correspondence::new(
            row.i_from.unwrap_or(f64::NAN),
            row.i_to.unwrap_or(f64::NAN),
            [row.x_from, row.y_from],
            [row.x_to, row.y_to],
        ));
    }
    Ok(groups
        .into_iter()
        .map(|((to, from), pairs)| CorrespondenceSet::new(from, to, pairs))
        .collect())
}

/// Fills NaN intensities by bilinear sampling of the given frames.
pub fn resample_missing(set: &mut CorrespondenceSet, from: &Frame, to: &Frame) {
    for c in &mut set.pairs {
        if c.i_from.is_nan() {
            c.i_from = bilinear(from.data(), from.width(), from.height(), c.p_from[0], c.p_from[1]);
        }
        if c.i_to.is_nan() {
            c.i_to = bilinear(to.data(), to.width(), to.height(), c.p_to[0], c.p_to[1]);
        }
    }
}

/// Writes sets in the correspondence CSV format, intensities included.
pub fn write_correspondences<W: Write>(writer: W, sets: &[CorrespondenceSet]) -> Result<(), TrackerError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in sets {
        for c in &s.pairs {
            w.serialize(Row {
                from_frame: s.from_frame,
                to_frame: s.to_frame,
                x_from: c.p_from[0],
                y_from: c.p_from[1],
                x_to: c.p_to[0],
                y_to: c.p_to[1],
                i_from: Some(c.i_from),
                i_to: Some(c.i_to),
            })?;
        }
    }
    if sets.iter().all(|s| s.is_empty()) {
        w.write_record(["from_frame", "to_frame", "x_from", "y_from", "x_to", "y_to", "i_from", "i_to"])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
