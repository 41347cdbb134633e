//! Synthetic thermal sequences with known gain/offset, bias field and motion.
//!
//! A fixed radiance map is viewed through a moving viewport. Each frame adds
//! transient hot regions and a static per-pixel bias, then an automatic gain
//! control stretches the viewport's `[min, max]` to `[0, 1]`. The stretch of
//! frame `t` is recorded as its absolute scale `max - min` and offset `min`.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::model::{ParamChain, RelativeParams};
use crate::spatial::GridSpec;
use crate::temporal::{Correspondence, CorrespondenceSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("frame {0} is degenerate: viewport radiance has no range")]
    Degenerate(usize),
    #[error("cannot read radiance image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("scene spec: {0}")]
    Parse(#[from] toml::de::Error),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadianceSpec {
    /// Octaves of smoothly interpolated lattice noise, normalized to `[0, 1]`.
    ValueNoise {
        width: usize,
        height: usize,
        #[serde(default = "default_octaves")]
        octaves: usize,
        /// Lattice spacing of the coarsest octave, in pixels.
        #[serde(default = "default_period")]
        period: f64,
    },
    /// 8-bit grayscale image, mapped to `[0, 1]`.
    Image { path: PathBuf },
    Constant { width: usize, height: usize, value: f64 },
}

fn default_octaves() -> usize {
    4
}

fn default_period() -> f64 {
    32.0
}

/// Viewport top-left corner in radiance-map pixels, per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionSpec {
    Static {
        #[serde(default)]
        origin: [i64; 2],
    },
    Linear {
        #[serde(default)]
        origin: [i64; 2],
        velocity: [i64; 2],
    },
    /// Explicit offsets, one per frame.
    Path { offsets: Vec<[i64; 2]> },
    /// Integer steps in `[-max_step, max_step]` per axis, reflected at the map border.
    RandomWalk {
        #[serde(default)]
        origin: [i64; 2],
        max_step: i64,
    },
}

/// Radiance added to a scene-fixed rectangle over a frame range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HotEvent {
    /// First frame with the event.
    pub start: usize,
    /// One past the last frame with the event.
    pub end: usize,
    /// `[x, y, width, height]` in radiance-map pixels.
    pub rect: [i64; 4],
    pub added: f64,
}

impl HotEvent {
    fn covers(&self, frame: usize, x: i64, y: i64) -> bool {
        let [rx, ry, rw, rh] = self.rect;
        frame >= self.start && frame < self.end && x >= rx && y >= ry && x < rx + rw && y < ry + rh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    /// Center in viewport pixels.
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    /// `[x, y, width, height]` in viewport pixels.
    pub rect: [usize; 4],
    pub value: f64,
}

/// Static additive bias over the viewport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BiasSpec {
    #[default]
    None,
    Gaussians { blobs: Vec<Blob> },
    /// `count` broad Gaussians at seeded positions, rescaled so the peak
    /// magnitude equals `amplitude`.
    RandomGaussians { count: usize, amplitude: f64 },
    Patches { patches: Vec<Patch> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgcMode {
    /// Stretch the exact viewport minimum and maximum.
    #[default]
    MinMax,
    /// Stretch the given lower/upper percentiles (in percent); the tails clip.
    Percentile { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub radiance: RadianceSpec,
    pub motion: MotionSpec,
    #[serde(default)]
    pub hot_events: Vec<HotEvent>,
    #[serde(default)]
    pub bias: BiasSpec,
    /// Standard deviation of additive noise on rendered intensities.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Standard deviation of zero-mean noise added to the target intensity of
    /// each generated correspondence, before outlier corruption.
    #[serde(default)]
    pub target_noise_sigma: f64,
    /// Fraction of generated correspondences whose target intensity is corrupted.
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Added to the target intensity of corrupted correspondences before clipping.
    #[serde(default = "default_outlier_offset")]
    pub outlier_offset: f64,
    #[serde(default)]
    pub agc: AgcMode,
    /// Correspondences generated per frame pair.
    #[serde(default = "default_pairs")]
    pub correspondences: usize,
    /// Each frame is matched against this many preceding frames.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_outlier_offset() -> f64 {
    0.2
}

fn default_pairs() -> usize {
    200
}

fn default_window() -> usize {
    5
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text)?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    /// Checks everything that does not need the radiance map.
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames == 0 {
            return Err(invalid("frames", "must be positive"));
        }
        if self.width < 2 || self.height < 2 {
            return Err(invalid("width/height", "viewport must be at least 2x2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma", "must be non-negative"));
        }
        if !(self.target_noise_sigma >= 0.0 && self.target_noise_sigma.is_finite()) {
            return Err(invalid("target_noise_sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(invalid("outlier_fraction", "must lie in [0, 1]"));
        }
        if !self.outlier_offset.is_finite() {
            return Err(invalid("outlier_offset", "must be finite"));
        }
        if self.window == 0 {
            return Err(invalid("window", "must be positive"));
        }
        match &self.radiance {
            RadianceSpec::ValueNoise {
                width,
                height,
                octaves,
                period,
            } => {
                if *width < 2 || *height < 2 {
                    return Err(invalid("radiance.width/height", "must be at least 2"));
                }
                if *octaves == 0 {
                    return Err(invalid("radiance.octaves", "must be positive"));
                }
                if !(*period >= 1.0) {
                    return Err(invalid("radiance.period", "must be at least 1"));
                }
            }
            RadianceSpec::Constant { width, height, value } => {
                if *width < 2 || *height < 2 {
                    return Err(invalid("radiance.width/height", "must be at least 2"));
                }
                if !value.is_finite() {
                    return Err(invalid("radiance.value", "must be finite"));
                }
            }
            RadianceSpec::Image { .. } => {}
        }
        match &self.motion {
            MotionSpec::Path { offsets } if offsets.len() != self.frames => {
                return Err(invalid(
                    "motion.offsets",
                    format!("has {} entries for {} frames", offsets.len(), self.frames),
                ));
            }
            MotionSpec::RandomWalk { max_step, .. } if *max_step < 0 => {
                return Err(invalid("motion.max_step", "must be non-negative"));
            }
            _ => {}
        }
        for (k, e) in self.hot_events.iter().enumerate() {
            if e.end <= e.start {
                return Err(invalid(format!("hot_events[{k}]"), "end must exceed start"));
            }
            if e.rect[2] <= 0 || e.rect[3] <= 0 {
                return Err(invalid(format!("hot_events[{k}].rect"), "must have positive size"));
            }
            if !e.added.is_finite() {
                return Err(invalid(format!("hot_events[{k}].added"), "must be finite"));
            }
        }
        match &self.bias {
            BiasSpec::Gaussians { blobs } => {
                for (k, b) in blobs.iter().enumerate() {
                    if !(b.sigma > 0.0) || !b.amplitude.is_finite() {
                        return Err(invalid(format!("bias.blobs[{k}]"), "needs positive sigma and finite amplitude"));
                    }
                }
            }
            BiasSpec::RandomGaussians { count, amplitude } => {
                if *count == 0 || !amplitude.is_finite() {
                    return Err(invalid("bias", "random gaussians need a positive count and finite amplitude"));
                }
            }
            BiasSpec::Patches { patches } => {
                for (k, p) in patches.iter().enumerate() {
                    let [x, y, w, h] = p.rect;
                    if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
                        return Err(invalid(format!("bias.patches[{k}].rect"), "must lie inside the viewport"));
                    }
                    if !p.value.is_finite() {
                        return Err(invalid(format!("bias.patches[{k}].value"), "must be finite"));
                    }
                }
            }
            BiasSpec::None => {}
        }
        if let AgcMode::Percentile { low, high } = self.agc {
            if !(0.0 <= low && low < high && high <= 100.0) {
                return Err(invalid("agc", "percentiles need 0 <= low < high <= 100"));
            }
        }
        Ok(())
    }
}

/// Ground truth for a rendered sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Absolute log-scale per frame, `ln(max - min)`.
    pub a: Vec<f64>,
    /// Absolute offset per frame, the stretched minimum.
    pub b: Vec<f64>,
    /// Viewport origin per frame.
    pub motion: Vec<[i64; 2]>,
    /// Bias per viewport pixel, row-major, in radiance units.
    pub bias: Vec<f64>,
    pub spec: SceneSpec,
}

impl GroundTruth {
    pub fn frames(&self) -> usize {
        self.a.len()
    }

    /// Parameters mapping frame `i` intensities to frame `j`.
    pub fn relative(&self, i: usize, j: usize) -> RelativeParams {
        let si = self.a[i].exp();
        RelativeParams::new(self.a[j] - self.a[i], (self.b[j] - self.b[i]) / si, i, j)
    }

    /// Chain referenced to frame 0.
    pub fn chain(&self) -> ParamChain {
        let mut chain = ParamChain::new(0);
        for t in 1..self.frames() {
            chain.push(self.relative(0, t), false).expect("frames increase");
        }
        chain
    }

    /// Bias in the units of frame-0-referenced calibrated intensities.
    pub fn bias_chain_units(&self) -> Vec<f64> {
        let s0 = self.a[0].exp();
        self.bias.iter().map(|r| r / s0).collect()
    }

    /// Mean bias per grid cell in chain units.
    pub fn cell_bias(&self, grid: &GridSpec) -> Vec<f64> {
        let chain_bias = self.bias_chain_units();
        let mut sum = vec![0.0; grid.cell_count()];
        let mut count = vec![0usize; grid.cell_count()];
        for y in 0..self.height {
            for x in 0..self.width {
                let c = grid.cell_of(x as f64, y as f64);
                sum[c] += chain_bias[y * self.width + x];
                count[c] += 1;
            }
        }
        sum.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// A scene ready to render: spec plus the realized radiance map, motion and bias.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    map_width: usize,
    map_height: usize,
    radiance: Vec<f64>,
    motion: Vec<[i64; 2]>,
    bias: Vec<f64>,
}

/// Distinct streams derived from the scene seed.
const STREAM_RADIANCE: u64 = 0x5261_6469;
const STREAM_MOTION: u64 = 0x4d6f_7469;
const STREAM_BIAS: u64 = 0x4269_6173;
const STREAM_NOISE: u64 = 0x4e6f_6973;
const STREAM_PAIRS: u64 = 0x5061_6972;

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ tag.rotate_left(32) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn value_noise(width: usize, height: usize, octaves: usize, period: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    let mut amp = 1.0;
    let mut p = period;
    for _ in 0..octaves {
        let lw = (width as f64 / p).ceil() as usize + 2;
        let lh = (height as f64 / p).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / p;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f64;
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..width {
                let fx = x as f64 / p;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f64;
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let v00 = lattice[y0 * lw + x0];
                let v10 = lattice[y0 * lw + x0 + 1];
                let v01 = lattice[(y0 + 1) * lw + x0];
                let v11 = lattice[(y0 + 1) * lw + x0 + 1];
                let top = v00 + (v10 - v00) * sx;
                let bottom = v01 + (v11 - v01) * sx;
                out[y * width + x] += amp * (top + (bottom - top) * sy);
            }
        }
        amp *= 0.5;
        p = (p / 2.0).max(1.0);
    }
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut out {
            *v = (*v - lo) / (hi - lo);
        }
    }
    out
}

impl Scene {
    pub fn build(spec: &SceneSpec, seed: u64) -> Result<Self, SynthError> {
        spec.validate()?;
        let (map_width, map_height, radiance) = match &spec.radiance {
            RadianceSpec::ValueNoise {
                width,
                height,
                octaves,
                period,
            } => {
                let mut rng = stream(seed, STREAM_RADIANCE, 0);
                (*width, *height, value_noise(*width, *height, *octaves, *period, &mut rng))
            }
            RadianceSpec::Constant { width, height, value } => (*width, *height, vec![*value; width * height]),
            RadianceSpec::Image { path } => {
                let img = image::open(path)
                    .map_err(|e| SynthError::Image {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?
                    .to_luma8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                (w, h, img.into_raw().into_iter().map(|q| f64::from(q) / 255.0).collect())
            }
        };
        let motion = realize_motion(spec, seed, map_width, map_height)?;
        for (t, o) in motion.iter().enumerate() {
            let inside = o[0] >= 0
                && o[1] >= 0
                && o[0] as usize + spec.width <= map_width
                && o[1] as usize + spec.height <= map_height;
            if !inside {
                return Err(invalid(
                    "motion",
                    format!("frame {t}: viewport at {o:?} leaves the {map_width}x{map_height} radiance map"),
                ));
            }
        }
        let bias = realize_bias(spec, seed);
        Ok(Self {
            spec: spec.clone(),
            seed,
            map_width,
            map_height,
            radiance,
            motion,
            bias,
        })
    }

    pub fn motion(&self) -> &[[i64; 2]] {
        &self.motion
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.map_width, self.map_height)
    }

    fn hot(&self, frame: usize, x: i64, y: i64) -> f64 {
        self.spec
            .hot_events
            .iter()
            .filter(|e| e.covers(frame, x, y))
            .map(|e| e.added)
            .sum()
    }

    /// Radiance plus hot events plus bias over the viewport of frame `t`.
    pub fn raw_frame(&self, t: usize) -> Vec<f64> {
        let (w, h) = (self.spec.width, self.spec.height);
        let [ox, oy] = self.motion[t];
        let mut raw = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (mx, my) = (ox + x as i64, oy + y as i64);
                let v = self.radiance[my as usize * self.map_width + mx as usize] + self.hot(t, mx, my) + self.bias[y * w + x];
                raw.push(v);
            }
        }
        raw
    }

    fn stretch(&self, t: usize, raw: &[f64]) -> Result<(f64, f64), SynthError> {
        let (lo, hi) = match self.spec.agc {
            AgcMode::MinMax => (
                raw.iter().copied().fold(f64::INFINITY, f64::min),
                raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            AgcMode::Percentile { low, high } => {
                let mut sorted = raw.to_vec();
                sorted.sort_by(f64::total_cmp);
                (percentile(&sorted, low), percentile(&sorted, high))
            }
        };
        if !(hi - lo > 1e-12) {
            return Err(SynthError::Degenerate(t));
        }
        Ok((lo, hi))
    }

    /// Renders every frame and the matching ground truth.
    pub fn render(&self) -> Result<(Vec<Frame>, GroundTruth), SynthError> {
        let (w, h) = (self.spec.width, self.spec.height);
        let noise = (self.spec.noise_sigma > 0.0).then(|| Normal::new(0.0, self.spec.noise_sigma).expect("sigma validated"));
        let rendered: Result<Vec<(Frame, f64, f64)>, SynthError> = (0..self.spec.frames)
            .into_par_iter()
            .map(|t| {
                let raw = self.raw_frame(t);
                let (lo, hi) = self.stretch(t, &raw)?;
                let mut rng = stream(self.seed, STREAM_NOISE, t as u64);
                let data = raw
                    .iter()
                    .map(|v| {
                        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                        ((v - lo) / (hi - lo) + n).clamp(0.0, 1.0)
                    })
                    .collect();
                let frame = Frame::new(t, w, h, data).expect("clamped to [0, 1]");
                Ok((frame, (hi - lo).ln(), lo))
            })
            .collect();
        let rendered = rendered?;
        let mut frames = Vec::with_capacity(rendered.len());
        let mut a = Vec::with_capacity(rendered.len());
        let mut b = Vec::with_capacity(rendered.len());
        for (f, at, bt) in rendered {
            frames.push(f);
            a.push(at);
            b.push(bt);
        }
        let truth = GroundTruth {
            seed: self.seed,
            width: w,
            height: h,
            a,
            b,
            motion: self.motion.clone(),
            bias: self.bias.clone(),
            spec: self.spec.clone(),
        };
        Ok((frames, truth))
    }

    /// Up to `n` exact correspondences between frames `i` and `j` at scene
    /// points visible in both, excluding points whose hot-event radiance
    /// differs between the two frames (and clipped points under percentile
    /// AGC). A point at map position `m` appears at `m - origin_t` in frame
    /// `t`. Target intensities receive `target_noise_sigma` noise, then
    /// `round(outlier_fraction * count)` pairs get `outlier_offset`
    /// added to their target intensity, clipped to `[0, 1]`.
    pub fn correspondences(&self, frames: &[Frame], i: usize, j: usize, n: usize, seed: u64) -> Correspondences {
        let (w, h) = (self.spec.width as i64, self.spec.height as i64);
        let (oi, oj) = (self.motion[i], self.motion[j]);
        let x0 = oi[0].max(oj[0]);
        let y0 = oi[1].max(oj[1]);
        let x1 = (oi[0] + w).min(oj[0] + w);
        let y1 = (oi[1] + h).min(oj[1] + h);
        let clip_check = matches!(self.spec.agc, AgcMode::Percentile { .. });
        let mut candidates = Vec::new();
        for my in y0..y1 {
            for mx in x0..x1 {
                if self.hot(i, mx, my) != self.hot(j, mx, my) {
                    continue;
                }
                let (pi, pj) = ((mx - oi[0], my - oi[1]), (mx - oj[0], my - oj[1]));
                if clip_check {
                    let a = frames[i].get(pi.0 as usize, pi.1 as usize);
                    let b = frames[j].get(pj.0 as usize, pj.1 as usize);
                    if a <= 0.0 || a >= 1.0 || b <= 0.0 || b >= 1.0 {
                        continue;
                    }
                }
                candidates.push((pi, pj));
            }
        }
        let mut rng = stream(seed ^ self.seed, STREAM_PAIRS, ((i as u64) << 32) | j as u64);
        let take = n.min(candidates.len());
        let mut idx = sample(&mut rng, candidates.len(), take).into_vec();
        idx.sort_unstable();
        let mut pairs: Vec<Correspondence> = idx
            .into_iter()
            .map(|k| {
                let (pi, pj) = candidates[k];
                let p_from = [pi.0 as f64, pi.1 as f64];
                let p_to = [pj.0 as f64, pj.1 as f64];
                Correspondence::new(
                    frames[i].get(pi.0 as usize, pi.1 as usize),
                    frames[j].get(pj.0 as usize, pj.1 as usize),
                    p_from,
                    p_to,
                )
            })
            .collect();
        if self.spec.target_noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.spec.target_noise_sigma).expect("sigma validated");
            for p in &mut pairs {
                p.i_to = (p.i_to + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let n_out = (self.spec.outlier_fraction * pairs.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut perturbed = order[..n_out].to_vec();
        perturbed.sort_unstable();
        for &k in &perturbed {
            pairs[k].i_to = (pairs[k].i_to + self.spec.outlier_offset).clamp(0.0, 1.0);
        }
        Correspondences {
            set: CorrespondenceSet::new(frames[i].index(), frames[j].index(), pairs),
            requested: n,
            perturbed,
        }
    }

    /// Sets into frame `t` from each of the `window` preceding frames.
    pub fn sets_into(&self, frames: &[Frame], t: usize, seed: u64) -> Vec<CorrespondenceSet> {
        (t.saturating_sub(self.spec.window)..t)
            .map(|i| self.correspondences(frames, i, t, self.spec.correspondences, seed).set)
            .filter(|s| !s.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub set: CorrespondenceSet,
    pub requested: usize,
    /// Indices into `set.pairs` of corrupted pairs.
    pub perturbed: Vec<usize>,
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn realize_motion(spec: &SceneSpec, seed: u64, map_w: usize, map_h: usize) -> Result<Vec<[i64; 2]>, SynthError> {
    let n = spec.frames;
    Ok(match &spec.motion {
        MotionSpec::Static { origin } => vec![*origin; n],
        MotionSpec::Linear { origin, velocity } => (0..n as i64)
            .map(|t| [origin[0] + velocity[0] * t, origin[1] + velocity[1] * t])
            .collect(),
        MotionSpec::Path { offsets } => offsets.clone(),
        MotionSpec::RandomWalk { origin, max_step } => {
            let max_x = map_w as i64 - spec.width as i64;
            let max_y = map_h as i64 - spec.height as i64;
            if max_x < 0 || max_y < 0 {
                return Err(invalid("radiance", "map is smaller than the viewport"));
            }
            let reflect = |v: i64, hi: i64| {
                if hi == 0 {
                    return 0;
                }
                let period = 2 * hi;
                let m = v.rem_euclid(period);
                if m > hi {
                    period - m
                } else {
                    m
                }
            };
            let mut rng = stream(seed, STREAM_MOTION, 0);
            let mut pos = *origin;
            let mut out = Vec::with_capacity(n);
            for t in 0..n {
                if t > 0 && *max_step > 0 {
                    pos[0] = reflect(pos[0] + rng.random_range(-max_step..=*max_step), max_x);
                    pos[1] = reflect(pos[1] + rng.random_range(-max_step..=*max_step), max_y);
                }
                out.push(pos);
            }
            out
        }
    })
}

fn realize_bias(spec: &SceneSpec, seed: u64) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let gaussians = |blobs: &[Blob]| {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = blobs
                    .iter()
                    .map(|b| {
                        let d2 = (x as f64 - b.center[0]).powi(2) + (y as f64 - b.center[1]).powi(2);
                        b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
            }
        }
        out
    };
    match &spec.bias {
        BiasSpec::None => vec![0.0; w * h],
        BiasSpec::Gaussians { blobs } => gaussians(blobs),
        BiasSpec::RandomGaussians { count, amplitude } => {
            let mut rng = stream(seed, STREAM_BIAS, 0);
            let blobs: Vec<Blob> = (0..*count)
                .map(|_| Blob {
                    center: [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)],
                    sigma: rng.random_range(0.25..0.5) * w.max(h) as f64,
                    amplitude: if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.5..1.0),
                })
                .collect();
            let mut out = gaussians(&blobs);
            let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                for v in &mut out {
                    *v *= amplitude / peak;
                }
            }
            out
        }
        BiasSpec::Patches { patches } => {
            let mut out = vec![0.0; w * h];
            for p in patches {
                let [px, py, pw, ph] = p.rect;
                for y in py..py + ph {
                    for x in px..px + pw {
                        out[y * w + x] += p.value;
                    }
                }
            }
            out
        }
    }
}

/// Renders `spec` with `seed`.
pub fn render_sequence(spec: &SceneSpec, seed: u64) -> Result<(Vec<Frame>, GroundTruth), SynthError> {
    Scene::build(spec, seed)?.render()
}

/// Exact correspondences between frames `i` and `j` of a rendered scene.
pub fn truth_correspondences(scene: &Scene, frames: &[Frame], i: usize, j: usize, n: usize, seed: u64) -> Correspondences {
    scene.correspondences(frames, i, j, n, seed)
}
