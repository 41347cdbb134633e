//! Temporal parameter estimation from pixel correspondences.
//!
//! Each correspondence set `C_{i,t}` yields an `i -> t` estimate through a
//! two-point RANSAC followed by a least-squares refit on the consensus set.
//! The estimates from all sets into frame `t` are re-expressed as
//! `(t-1) -> t`, averaged with weights `|C_{i,t}|`, chained onto the previous
//! frame's entry and pulled toward nominal values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{adjust_for_drift, change_ref, compose, DriftConfig, ModelError, ParamChain, RelativeParams};

/// Minimal sample: two correspondences determine `(a, b)`.
pub const SAMPLE_SIZE: usize = 2;

/// Spread of from-intensities below which a sample or set cannot fix the scale.
pub const DEGENERACY_EPS: f64 = 1e-4;

/// RANSAC stops early once this fraction of pairs agrees with a hypothesis.
const EARLY_EXIT_RATIO: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("degenerate sample")]
    DegenerateSample,
    #[error("degenerate correspondence set")]
    DegenerateSet,
    #[error("fitted scale is not positive")]
    InvalidScale,
    #[error("need at least {SAMPLE_SIZE} pairs, got {0}")]
    TooFewPairs(usize),
    #[error("best consensus has {best} inliers, {required} required")]
    EstimationFailed { best: usize, required: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("correspondence set {from}->{to} does not end at frame {frame}")]
    WrongTarget { from: usize, to: usize, frame: usize },
    #[error("frame {frame} is not after the chain's last frame {last}")]
    NotAfterChain { frame: usize, last: usize },
    #[error("frame {0} is not in the parameter chain")]
    MissingChainEntry(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid correspondence set: {0}")]
    InvalidSet(String),
}

/// One pixel correspondence with the intensities sampled at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub i_from: f64,
    pub i_to: f64,
    pub p_from: [f64; 2],
    pub p_to: [f64; 2],
}

impl Correspondence {
    pub fn new(i_from: f64, i_to: f64, p_from: [f64; 2], p_to: [f64; 2]) -> Self {
        Self {
            i_from,
            i_to,
            p_from,
            p_to,
        }
    }

    /// A correspondence carrying intensities only.
    pub fn intensities(i_from: f64, i_to: f64) -> Self {
        Self::new(i_from, i_to, [0.0; 2], [0.0; 2])
    }
}

/// Correspondences between frame `from_frame` and a later frame `to_frame`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub from_frame: usize,
    pub to_frame: usize,
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(from_frame: usize, to_frame: usize, pairs: Vec<Correspondence>) -> Self {
        Self {
            from_frame,
            to_frame,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks frame order, intensity range, and (when given) pixel bounds.
    pub fn validate(&self, bounds: Option<(usize, usize)>) -> Result<(), TemporalError> {
        if self.from_frame >= self.to_frame {
            return Err(TemporalError::InvalidSet(format!(
                "from_frame {} must precede to_frame {}",
                self.from_frame, self.to_frame
            )));
        }
        for (k, c) in self.pairs.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.i_from) || !(0.0..=1.0).contains(&c.i_to) {
                return Err(TemporalError::InvalidSet(format!("pair {k}: intensity outside [0, 1]")));
            }
            if let Some((w, h)) = bounds {
                let inside = |p: [f64; 2]| {
                    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64
                };
                if !inside(c.p_from) || !inside(c.p_to) {
                    return Err(TemporalError::InvalidSet(format!("pair {k}: pixel outside image")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Maximum `|I_to - g(I_from)|` for an inlier, in intensity units.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            inlier_threshold: 0.02,
            min_inliers: 5,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.inlier_threshold > 0.0) {
            return Err("ransac.inlier_threshold must be positive".into());
        }
        if self.max_iterations == 0 {
            return Err("ransac.max_iterations must be at least 1".into());
        }
        Ok(())
    }
}

/// Log-affine coefficients before they are attached to a frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
}

impl AffineFit {
    #[inline]
    pub fn predict(&self, i_from: f64) -> f64 {
        (i_from - self.b) * (-self.a).exp()
    }

    pub fn between(&self, from: usize, to: usize) -> RelativeParams {
        RelativeParams::new(self.a, self.b, from, to)
    }
}

/// Result of estimating one correspondence set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEstimate {
    pub params: RelativeParams,
    pub inlier_count: usize,
    /// RMS of `I_to - g(I_from)` over the inliers.
    pub residual_rms: f64,
}

/// The `(a, b)` passing exactly through two `(I_from, I_to)` samples.
pub fn fit_pair_exact(p1: (f64, f64), p2: (f64, f64)) -> Result<AffineFit, EstimateError> {
    let df = p1.0 - p2.0;
    let dt = p1.1 - p2.1;
    if df.abs() <= DEGENERACY_EPS || dt == 0.0 {
        return Err(EstimateError::DegenerateSample);
    }
    let scale = df / dt;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(EstimateError::DegenerateSample);
    }
    Ok(AffineFit {
        a: scale.ln(),
        b: p1.0 - scale * p1.1,
    })
}

/// Least-squares `(a, b)` over the pairs selected by `mask` (all when `None`).
///
/// Solved as the linear regression `I_to = u I_from + v` with
/// `u = e^{-a}` and `v = -b e^{-a}`.
pub fn fit_pair_lsq(pairs: &[Correspondence], mask: Option<&[bool]>) -> Result<AffineFit, EstimateError> {
    let selected = |k: usize| mask.is_none_or(|m| m[k]);
    let mut n = 0usize;
    let (mut sf, mut st) = (0.0, 0.0);
    for (k, c) in pairs.iter().enumerate() {
        if selected(k) {
            n += 1;
            sf += c.i_from;
            st += c.i_to;
        }
    }
    if n < SAMPLE_SIZE {
        return Err(EstimateError::DegenerateSet);
    }
    let mf = sf / n as f64;
    let mt = st / n as f64;
    let (mut sff, mut sft) = (0.0, 0.0);
    for (k, c) in pairs.iter().enumerate() {
        if selected(k) {
            let df = c.i_from - mf;
            sff += df * df;
            sft += df * (c.i_to - mt);
        }
    }
    if (sff / n as f64).sqrt() <= DEGENERACY_EPS {
        return Err(EstimateError::DegenerateSet);
    }
    let u = sft / sff;
    if !(u > 0.0) {
        return Err(EstimateError::InvalidScale);
    }
    let v = mt - u * mf;
    Ok(AffineFit { a: -u.ln(), b: -v / u })
}

fn residual_rms(pairs: &[Correspondence], mask: &[bool], fit: &AffineFit) -> f64 {
    let (mut ss, mut n) = (0.0, 0usize);
    for (c, _) in pairs.iter().zip(mask).filter(|(_, &m)| m) {
        let r = c.i_to - fit.predict(c.i_from);
        ss += r * r;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (ss / n as f64).sqrt()
    }
}

/// Seed for one frame pair, independent of the order sets are processed in.
pub fn pair_seed(global: u64, from: usize, to: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    global ^ mix((from as u64) << 32 ^ to as u64)
}

/// Hypothesize-and-verify estimate of the `from -> to` parameters of a set.
pub fn ransac_estimate(set: &CorrespondenceSet, cfg: &RansacConfig) -> Result<PairEstimate, EstimateError> {
    let pairs = &set.pairs;
    let n = pairs.len();
    if n < SAMPLE_SIZE {
        return Err(EstimateError::TooFewPairs(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.rng_seed, set.from_frame, set.to_frame));
    let mut mask = vec![false; n];
    let mut best_mask = vec![false; n];
    let mut best_count = 0usize;
    let early_exit = (EARLY_EXIT_RATIO * n as f64).ceil() as usize;

    for _ in 0..cfg.max_iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (ci, cj) = (&pairs[i], &pairs[j]);
        let Ok(fit) = fit_pair_exact((ci.i_from, ci.i_to), (cj.i_from, cj.i_to)) else {
            continue;
        };
        let mut count = 0;
        for (m, c) in mask.iter_mut().zip(pairs) {
            *m = (c.i_to - fit.predict(c.i_from)).abs() < cfg.inlier_threshold;
            count += usize::from(*m);
        }
        if count > best_count {
            best_count = count;
            best_mask.copy_from_slice(&mask);
            if best_count >= early_exit {
                break;
            }
        }
    }

    let required = cfg.min_inliers.max(SAMPLE_SIZE);
    if best_count < required {
        return Err(EstimateError::EstimationFailed {
            best: best_count,
            required,
        });
    }
    let fit = fit_pair_lsq(pairs, Some(&best_mask))?;
    Ok(PairEstimate {
        params: fit.between(set.from_frame, set.to_frame),
        inlier_count: best_count,
        residual_rms: residual_rms(pairs, &best_mask, &fit),
    })
}

/// Plain least squares over every pair, without outlier rejection.
pub fn least_squares_estimate(set: &CorrespondenceSet) -> Result<PairEstimate, EstimateError> {
    let fit = fit_pair_lsq(&set.pairs, None)?;
    let mask = vec![true; set.len()];
    Ok(PairEstimate {
        params: fit.between(set.from_frame, set.to_frame),
        inlier_count: set.len(),
        residual_rms: residual_rms(&set.pairs, &mask, &fit),
    })
}

/// Outcome of one correspondence set while processing a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SetOutcome {
    pub from_frame: usize,
    pub pairs: usize,
    pub estimate: Result<PairEstimate, EstimateError>,
    /// The estimate re-expressed as `(t-1) -> t`.
    pub rebased: Option<RelativeParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub frame: usize,
    /// Fused `(t-1) -> t` parameters before drift adjustment.
    pub fused: RelativeParams,
    /// The chain entry appended for this frame.
    pub entry: RelativeParams,
    pub untracked: bool,
    pub sets: Vec<SetOutcome>,
}

/// Estimates frame `frame` from every set ending there and appends it to the chain.
///
/// Sets whose estimation fails carry no weight. When no set succeeds the
/// previous entry is repeated (identity relative parameters) and the frame is
/// flagged untracked; drift adjustment is skipped for such frames.
///
/// Drift adjustment acts on the chained entry: the pull toward nominal values
/// applies to the frame's parameters relative to the first frame.
pub fn process_frame(
    sets: &[CorrespondenceSet],
    frame: usize,
    chain: &mut ParamChain,
    ransac: &RansacConfig,
    drift: &DriftConfig,
) -> Result<FrameEstimate, TemporalError> {
    let prev = *chain.last();
    let prev_frame = prev.params.to;
    if frame <= prev_frame {
        return Err(TemporalError::NotAfterChain {
            frame,
            last: prev_frame,
        });
    }
    for s in sets {
        if s.to_frame != frame {
            return Err(TemporalError::WrongTarget {
                from: s.from_frame,
                to: s.to_frame,
                frame,
            });
        }
        if chain.get(s.from_frame).is_none() {
            return Err(TemporalError::MissingChainEntry(s.from_frame));
        }
    }

    let estimates: Vec<_> = sets.par_iter().map(|s| ransac_estimate(s, ransac)).collect();

    let (mut sum_a, mut sum_b, mut total) = (0.0, 0.0, 0usize);
    let mut outcomes = Vec::with_capacity(sets.len());
    for (s, est) in sets.iter().zip(estimates) {
        let rebased = match &est {
            Ok(e) => {
                let ref_to_i = chain.get(s.from_frame).expect("checked above");
                Some(change_ref(&e.params, ref_to_i, &prev.params)?)
            }
            Err(_) => None,
        };
        if let Some(r) = &rebased {
            let w = s.len();
            sum_a += r.a * w as f64;
            sum_b += r.b * w as f64;
            total += w;
        }
        outcomes.push(SetOutcome {
            from_frame: s.from_frame,
            pairs: s.len(),
            estimate: est,
            rebased,
        });
    }

    let untracked = total == 0;
    let fused = if untracked {
        RelativeParams::identity_between(prev_frame, frame)
    } else {
        RelativeParams::new(sum_a / total as f64, sum_b / total as f64, prev_frame, frame)
    };
    let mut entry = compose(&prev.params, &fused)?;
    if !untracked {
        entry = adjust_for_drift(&entry, drift);
    }
    chain.push(entry, untracked)?;
    Ok(FrameEstimate {
        frame,
        fused,
        entry,
        untracked,
        sets: outcomes,
    })
}
