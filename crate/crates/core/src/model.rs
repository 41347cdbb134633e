//! Parameter algebra of the photometric model.
//!
//! A frame's intensities relate to a reference frame through an affine map
//! `I_to = (I_from - b) / e^a`. [`RelativeParams`] carry one such map between
//! two frames. They compose like affine maps, with `(0, 0)` as the identity,
//! so the chain of 1-referenced parameters is a fold of per-pair parameters.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("frame mismatch: expected params starting at frame {expected}, got {actual}")]
    FrameMismatch { expected: usize, actual: usize },
    #[error("invalid drift config: {0}")]
    InvalidDrift(&'static str),
    #[error("palette needs at least 2 entries, got {0}")]
    PaletteTooSmall(usize),
    #[error("palette is not closed: first and last entries differ")]
    PaletteNotClosed,
    #[error("chain entry for frame {frame} must be referenced to frame {reference}")]
    ChainReference { frame: usize, reference: usize },
    #[error("chain frames must strictly increase: {frame} after {last}")]
    ChainOrder { frame: usize, last: usize },
}

/// Affine temporal parameters mapping frame `from` intensities to frame `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeParams {
    /// Log-scale.
    pub a: f64,
    /// Offset in intensity units.
    pub b: f64,
    pub from: usize,
    pub to: usize,
}

impl RelativeParams {
    pub fn new(a: f64, b: f64, from: usize, to: usize) -> Self {
        Self { a, b, from, to }
    }

    /// The identity map of `frame` onto itself.
    pub fn identity(frame: usize) -> Self {
        Self::new(0.0, 0.0, frame, frame)
    }

    /// `(0, 0)` between two frames.
    pub fn identity_between(from: usize, to: usize) -> Self {
        Self::new(0.0, 0.0, from, to)
    }

    /// Builds params from a scale `e^a` instead of its logarithm.
    pub fn from_scale(scale: f64, b: f64, from: usize, to: usize) -> Self {
        Self::new(scale.ln(), b, from, to)
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.a.exp()
    }

    /// `c = e^a + b`, the image of full-scale intensity.
    #[inline]
    pub fn c(&self) -> f64 {
        self.scale() + self.b
    }

    /// `c - b`, which equals `e^a`.
    #[inline]
    pub fn gap(&self) -> f64 {
        self.c() - self.b
    }

    pub fn is_identity(&self) -> bool {
        self.a == 0.0 && self.b == 0.0
    }

    /// The map from `to` back to `from`.
    pub fn inverse(&self) -> Self {
        Self::new(-self.a, -self.b * (-self.a).exp(), self.to, self.from)
    }

    /// Relabels the frame pair without touching the coefficients.
    pub fn between(mut self, from: usize, to: usize) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    /// `(I - b) / e^a`, unclamped.
    #[inline]
    pub fn apply_forward(&self, intensity: f64) -> f64 {
        (intensity - self.b) * (-self.a).exp()
    }

    /// `I e^a + b`, the inverse of [`apply_forward`](Self::apply_forward).
    #[inline]
    pub fn apply_inverse(&self, intensity: f64) -> f64 {
        intensity * self.scale() + self.b
    }
}

/// Chains `from -> mid` with `mid -> to`.
pub fn compose(first: &RelativeParams, second: &RelativeParams) -> Result<RelativeParams, ModelError> {
    if first.to != second.from {
        return Err(ModelError::FrameMismatch {
            expected: first.to,
            actual: second.from,
        });
    }
    Ok(RelativeParams::new(
        first.a + second.a,
        first.b + first.scale() * second.b,
        first.from,
        second.to,
    ))
}

/// Re-expresses an `i -> t` estimate as `(t-1) -> t` using the chain entries
/// for `i` and `t-1`, both referenced to the same first frame.
pub fn change_ref(
    i_to_t: &RelativeParams,
    ref_to_i: &RelativeParams,
    ref_to_prev: &RelativeParams,
) -> Result<RelativeParams, ModelError> {
    if ref_to_i.to != i_to_t.from {
        return Err(ModelError::FrameMismatch {
            expected: i_to_t.from,
            actual: ref_to_i.to,
        });
    }
    if ref_to_i.from != ref_to_prev.from {
        return Err(ModelError::FrameMismatch {
            expected: ref_to_i.from,
            actual: ref_to_prev.from,
        });
    }
    let prev = ref_to_prev.to;
    let i = i_to_t.from;
    if i == prev {
        return Ok(*i_to_t);
    }
    // i -> (t-1) from the chain, then (t-1) -> t by differencing against i -> t.
    let i_to_prev_a = ref_to_prev.a - ref_to_i.a;
    let i_to_prev_b = (ref_to_prev.b - ref_to_i.b) * (-ref_to_i.a).exp();
    Ok(RelativeParams::new(
        i_to_t.a - i_to_prev_a,
        (i_to_t.b - i_to_prev_b) * (-i_to_prev_a).exp(),
        prev,
        i_to_t.to,
    ))
}

/// Coefficients of the soft pull toward nominal parameters (`c = 1`, `b = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    /// Weight of the term that keeps `c - b` near 1.
    pub xi_gap: f64,
    /// Weight of the pull toward `c = 1`, `b = 0`.
    pub xi_base: f64,
    /// Minimum allowed `c - b` after adjustment.
    pub gap_floor: f64,
}

impl Default for DriftConfig {
    // Applied to the frame-0-referenced entry every frame, so the gap term
    // has a time constant of about 1 / (2 xi_gap) frames; 0.1 would forget a
    // sustained gain change within five frames.
    fn default() -> Self {
        Self {
            xi_gap: 0.01,
            xi_base: 0.025,
            gap_floor: 0.05,
        }
    }
}

impl DriftConfig {
    /// No adjustment at all.
    pub fn disabled() -> Self {
        Self {
            xi_gap: 0.0,
            xi_base: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.xi_gap) {
            return Err(ModelError::InvalidDrift("xi_gap must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.xi_base) {
            return Err(ModelError::InvalidDrift("xi_base must lie in [0, 1)"));
        }
        if !(self.gap_floor > 0.0 && self.gap_floor.is_finite()) {
            return Err(ModelError::InvalidDrift("gap_floor must be positive"));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.xi_gap == 0.0 && self.xi_base == 0.0
    }
}

/// Pulls `c` toward 1 and `b` toward 0 and keeps the gap `c - b` open.
///
/// A gap that would fall to `gap_floor` or below is reopened to exactly
/// `gap_floor` around its midpoint `(c + b) / 2`.
pub fn adjust_for_drift(p: &RelativeParams, cfg: &DriftConfig) -> RelativeParams {
    let scale = p.scale();
    if cfg.is_disabled() && scale > cfg.gap_floor {
        return *p;
    }
    let c = scale + p.b;
    let delta = (1.0 - scale) * cfg.xi_gap;
    let mut c_adj = c - (c - 1.0) * cfg.xi_base + delta;
    let mut b_adj = p.b - p.b * cfg.xi_base - delta;
    if c_adj - b_adj <= cfg.gap_floor {
        let mid = 0.5 * (c_adj + b_adj);
        c_adj = mid + 0.5 * cfg.gap_floor;
        b_adj = mid - 0.5 * cfg.gap_floor;
    }
    RelativeParams::new((c_adj - b_adj).ln(), b_adj, p.from, p.to)
}

/// Maps an observed intensity into the reference frame: `I e^a + b - r`.
#[inline]
pub fn calibrate_pixel(intensity: f64, chain_entry: &RelativeParams, r: f64) -> f64 {
    intensity * chain_entry.scale() + chain_entry.b - r
}

/// Cyclic grayscale ramp with period 1: rises 0 -> 1 over the first half of
/// each period and falls back to 0 over the second half.
pub fn cyclic_gray(value: f64) -> f64 {
    let v = value.rem_euclid(1.0);
    if v < 0.5 {
        2.0 * v
    } else {
        -2.0 * v + 2.0
    }
}

/// A closed lookup table of RGB colors, interpolated linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorPalette {
    entries: Vec<[f64; 3]>,
}

impl ColorPalette {
    pub fn new(entries: Vec<[f64; 3]>) -> Result<Self, ModelError> {
        if entries.len() < 2 {
            return Err(ModelError::PaletteTooSmall(entries.len()));
        }
        if entries.first() != entries.last() {
            return Err(ModelError::PaletteNotClosed);
        }
        Ok(Self { entries })
    }

    /// The cyclic grayscale ramp sampled at `n` points.
    pub fn gray_ramp(n: usize) -> Self {
        let n = n.max(3);
        let entries = (0..n)
            .map(|k| {
                let g = cyclic_gray(k as f64 / (n - 1) as f64);
                [g, g, g]
            })
            .collect();
        Self { entries }
    }

    /// A hue wheel at full saturation; an optional high-contrast alternative
    /// to the gray ramp.
    pub fn rainbow() -> Self {
        const N: usize = 13;
        let entries = (0..N)
            .map(|k| hue_to_rgb(k as f64 / (N - 1) as f64))
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[[f64; 3]] {
        &self.entries
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Looks up `value mod 1` in a cyclic palette.
pub fn cyclic_colormap(value: f64, palette: &ColorPalette) -> [f64; 3] {
    let n = palette.entries.len();
    let pos = value.rem_euclid(1.0) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    let t = pos - i as f64;
    let lo = palette.entries[i];
    let hi = palette.entries[i + 1];
    [
        lo[0] + (hi[0] - lo[0]) * t,
        lo[1] + (hi[1] - lo[1]) * t,
        lo[2] + (hi[2] - lo[2]) * t,
    ]
}

/// One chain entry: the frame's parameters relative to the first frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainEntry {
    pub params: RelativeParams,
    /// Set when no correspondence set produced an estimate for this frame.
    pub untracked: bool,
}

/// Serialized form of a chain entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub frame: usize,
    pub a_1t: f64,
    pub b_1t: f64,
}

/// Append-only parameters of every processed frame relative to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamChain {
    reference: usize,
    entries: Vec<ChainEntry>,
}

impl ParamChain {
    /// Starts a chain whose first frame is the reference, fixed at `(0, 0)`.
    pub fn new(reference: usize) -> Self {
        Self {
            reference,
            entries: vec![ChainEntry {
                params: RelativeParams::identity(reference),
                untracked: false,
            }],
        }
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ChainEntry] {
        &self.entries
    }

    pub fn last(&self) -> &ChainEntry {
        self.entries.last().expect("chain always holds the reference")
    }

    pub fn last_frame(&self) -> usize {
        self.last().params.to
    }

    pub fn push(&mut self, params: RelativeParams, untracked: bool) -> Result<(), ModelError> {
        if params.from != self.reference {
            return Err(ModelError::ChainReference {
                frame: params.to,
                reference: self.reference,
            });
        }
        let last = self.last_frame();
        if params.to <= last {
            return Err(ModelError::ChainOrder {
                frame: params.to,
                last,
            });
        }
        self.entries.push(ChainEntry { params, untracked });
        Ok(())
    }

    pub fn entry(&self, frame: usize) -> Option<&ChainEntry> {
        self.entries
            .binary_search_by_key(&frame, |e| e.params.to)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn get(&self, frame: usize) -> Option<&RelativeParams> {
        self.entry(frame).map(|e| &e.params)
    }

    /// The entry preceding `frame` in the chain.
    pub fn previous(&self, frame: usize) -> Option<&RelativeParams> {
        let i = self
            .entries
            .binary_search_by_key(&frame, |e| e.params.to)
            .ok()?;
        i.checked_sub(1).map(|j| &self.entries[j].params)
    }

    /// `i -> j` parameters derived from the two chain entries.
    pub fn relative(&self, i: usize, j: usize) -> Option<RelativeParams> {
        let pi = self.get(i)?;
        let pj = self.get(j)?;
        compose(&pi.inverse(), pj).ok()
    }

    pub fn untracked_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().filter(|e| e.untracked).map(|e| e.params.to)
    }

    pub fn records(&self) -> Vec<ChainRecord> {
        self.entries
            .iter()
            .map(|e| ChainRecord {
                frame: e.params.to,
                a_1t: e.params.a,
                b_1t: e.params.b,
            })
            .collect()
    }

    /// Rebuilds a chain from records; the first record is the reference.
    pub fn from_records(records: &[ChainRecord]) -> Result<Self, ModelError> {
        let Some(first) = records.first() else {
            return Ok(Self::new(0));
        };
        let reference = first.frame;
        let mut chain = Self {
            reference,
            entries: vec![ChainEntry {
                params: RelativeParams::new(first.a_1t, first.b_1t, reference, reference),
                untracked: false,
            }],
        };
        for r in &records[1..] {
            chain.push(RelativeParams::new(r.a_1t, r.b_1t, reference, r.frame), false)?;
        }
        Ok(chain)
    }

    pub fn mark_untracked(&mut self, frames: &[usize]) {
        for e in &mut self.entries {
            if frames.contains(&e.params.to) {
                e.untracked = true;
            }
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in self.records() {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<ChainRecord>, std::io::Error> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<ChainRecord>, csv::Error> {
        csv::Reader::from_reader(r).deserialize().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    const EPS: f64 = 1e-12;

    fn p(a: f64, b: f64, from: usize, to: usize) -> RelativeParams {
        RelativeParams::new(a, b, from, to)
    }

    #[test]
    fn apply_forward_vectors() {
        assert_eq!(RelativeParams::identity(0).apply_forward(0.7), 0.7);
        assert!((p(LN_2, 0.1, 0, 1).apply_forward(0.5) - 0.2).abs() < EPS);
        assert!((p(LN_2, -0.1, 0, 1).apply_forward(0.2) - 0.15).abs() < EPS);
    }

    #[test]
    fn compose_vectors() {
        let q = p(0.3, -0.2, 0, 1);
        assert_eq!(compose(&RelativeParams::identity(0), &q).unwrap(), q);
        let r = compose(&p(LN_2, 0.1, 0, 1), &p(0.5f64.ln(), -0.05, 1, 2)).unwrap();
        assert!(r.a.abs() < EPS && r.b.abs() < EPS);
        assert_eq!((r.from, r.to), (0, 2));
        assert_eq!(
            compose(&p(0.0, 0.0, 0, 1), &p(0.0, 0.0, 2, 3)),
            Err(ModelError::FrameMismatch { expected: 1, actual: 2 })
        );
    }

    /// Absolute (scale, offset) per frame, relative to a hypothetical frame.
    fn truth_relative(abs: &[(f64, f64)], i: usize, j: usize) -> RelativeParams {
        let (si, bi) = abs[i];
        let (sj, bj) = abs[j];
        RelativeParams::from_scale(sj / si, (bj - bi) / si, i, j)
    }

    #[test]
    fn change_ref_matches_composition_oracle() {
        let abs = [(1.3, 0.05), (0.9, -0.1), (1.7, 0.2), (1.1, 0.0)];
        // chain referenced to frame 0
        let chain: Vec<_> = (0..4).map(|k| truth_relative(&abs, 0, k)).collect();
        let t = 3;
        let i = 1;
        let got = change_ref(&truth_relative(&abs, i, t), &chain[i], &chain[t - 1]).unwrap();
        let want = truth_relative(&abs, t - 1, t);
        assert!((got.a - want.a).abs() < EPS, "{got:?} vs {want:?}");
        assert!((got.b - want.b).abs() < EPS);
        assert_eq!((got.from, got.to), (2, 3));
        let oracle = compose(&chain[t - 1].inverse(), &chain[t]).unwrap();
        assert!((got.a - oracle.a).abs() < EPS && (got.b - oracle.b).abs() < EPS);
    }

    #[test]
    fn change_ref_trivial_cases() {
        let pit = p(0.4, 0.1, 4, 5);
        let c = p(0.2, 0.3, 0, 4);
        assert_eq!(change_ref(&pit, &c, &c).unwrap(), pit);
        let got = change_ref(
            &RelativeParams::identity_between(2, 4),
            &RelativeParams::identity_between(0, 2),
            &RelativeParams::identity_between(0, 3),
        )
        .unwrap();
        assert!(got.is_identity());
        assert_eq!((got.from, got.to), (3, 4));
        assert!(change_ref(&pit, &p(0.0, 0.0, 0, 3), &c).is_err());
    }

    #[test]
    fn drift_vectors() {
        let cfg = DriftConfig {
            xi_gap: 0.1,
            xi_base: 0.025,
            gap_floor: 0.05,
        };
        assert_eq!(adjust_for_drift(&p(0.0, 0.0, 0, 1), &cfg), p(0.0, 0.0, 0, 1));
        let q = adjust_for_drift(&p(1.2f64.ln(), -0.1, 0, 1), &cfg);
        assert!((q.c() - 1.0775).abs() < EPS);
        assert!((q.b + 0.0775).abs() < EPS);
        assert!((q.a - 1.155f64.ln()).abs() < EPS);
        let off = DriftConfig::disabled();
        let r = p(1.2f64.ln(), -0.1, 0, 1);
        assert_eq!(adjust_for_drift(&r, &off), r);
    }

    #[test]
    fn drift_clamps_gap_around_midpoint() {
        let cfg = DriftConfig {
            xi_gap: 0.0,
            xi_base: 0.0,
            gap_floor: 0.05,
        };
        let q = adjust_for_drift(&p(0.01f64.ln(), 0.4, 0, 1), &cfg);
        assert!((q.gap() - 0.05).abs() < EPS);
        assert!((0.5 * (q.c() + q.b) - 0.405).abs() < EPS);
    }

    #[test]
    fn drift_config_validation() {
        assert!(DriftConfig::default().validate().is_ok());
        let bad = DriftConfig {
            xi_base: 1.0,
            ..DriftConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DriftConfig {
            gap_floor: 0.0,
            ..DriftConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn calibrate_vectors() {
        assert_eq!(calibrate_pixel(0.3, &RelativeParams::identity(0), 0.0), 0.3);
        assert!((calibrate_pixel(0.2, &p(LN_2, 0.1, 0, 1), 0.05) - 0.45).abs() < EPS);
        // forward model then calibrate
        let (scale, b, r) = (1.7, -0.12, 0.03);
        let radiance = 0.42;
        let observed = (radiance + r - b) / scale;
        let back = calibrate_pixel(observed, &RelativeParams::from_scale(scale, b, 0, 1), r);
        assert!((back - radiance).abs() < EPS);
    }

    #[test]
    fn cyclic_gray_vectors() {
        assert_eq!(cyclic_gray(0.0), 0.0);
        assert!((cyclic_gray(0.25) - 0.5).abs() < EPS);
        assert!((cyclic_gray(0.75) - 0.5).abs() < EPS);
        assert!((cyclic_gray(1.2) - 0.4).abs() < EPS);
        assert!((cyclic_gray(-0.25) - 0.5).abs() < EPS);
    }

    #[test]
    fn cyclic_gray_is_continuous() {
        let step = 1e-4;
        let mut max_jump: f64 = 0.0;
        let mut prev = cyclic_gray(-2.0);
        for k in 1..=40_000 {
            let v = cyclic_gray(-2.0 + k as f64 * step);
            max_jump = max_jump.max((v - prev).abs());
            prev = v;
        }
        assert!(max_jump <= 2.0 * step * 2.0, "{max_jump}");
    }

    #[test]
    fn palette_vectors() {
        assert_eq!(ColorPalette::new(vec![[0.0; 3]]), Err(ModelError::PaletteTooSmall(1)));
        assert_eq!(
            ColorPalette::new(vec![[0.0; 3], [1.0; 3]]),
            Err(ModelError::PaletteNotClosed)
        );
        let black = ColorPalette::new(vec![[0.0; 3], [0.0; 3]]).unwrap();
        assert_eq!(cyclic_colormap(0.5, &black), [0.0; 3]);
        let rainbow = ColorPalette::rainbow();
        assert_eq!(cyclic_colormap(0.0, &rainbow), cyclic_colormap(1.0, &rainbow));
    }

    #[test]
    fn gray_palette_reproduces_ramp() {
        let n = 257;
        let palette = ColorPalette::gray_ramp(n);
        for k in 0..1000 {
            let v = -1.5 + k as f64 * 0.00437;
            let rgb = cyclic_colormap(v, &palette);
            let g = cyclic_gray(v);
            assert!((rgb[0] - g).abs() <= 1.0 / (n - 1) as f64, "{v}: {rgb:?} vs {g}");
            assert_eq!(rgb[0], rgb[1]);
        }
    }

    #[test]
    fn chain_push_and_lookup() {
        let mut chain = ParamChain::new(0);
        chain.push(p(0.1, 0.0, 0, 1), false).unwrap();
        chain.push(p(0.2, 0.1, 0, 3), true).unwrap();
        assert_eq!(chain.len(), 3);
        assert_eq!(chain.get(3).unwrap().a, 0.2);
        assert!(chain.get(2).is_none());
        assert_eq!(chain.previous(3).unwrap().to, 1);
        assert_eq!(chain.untracked_frames().collect::<Vec<_>>(), vec![3]);
        assert!(chain.push(p(0.0, 0.0, 0, 3), false).is_err());
        assert!(chain.push(p(0.0, 0.0, 1, 4), false).is_err());
    }

    #[test]
    fn chain_serialization() {
        let mut chain = ParamChain::new(0);
        chain.push(p(0.1, -0.25, 0, 1), false).unwrap();
        let mut json = Vec::new();
        chain.write_jsonl(&mut json).unwrap();
        let text = String::from_utf8(json.clone()).unwrap();
        assert!(text.starts_with("{\"frame\":0,\"a_1t\":0.0,\"b_1t\":0.0}\n"));
        let recs = ParamChain::read_jsonl(&json[..]).unwrap();
        assert_eq!(ParamChain::from_records(&recs).unwrap(), chain);
        let mut csv_out = Vec::new();
        chain.write_csv(&mut csv_out).unwrap();
        let text = String::from_utf8(csv_out.clone()).unwrap();
        assert!(text.starts_with("frame,a_1t,b_1t\n"));
        assert_eq!(ParamChain::read_csv(&csv_out[..]).unwrap(), recs);
    }

    fn arb_params(from: usize, to: usize) -> impl Strategy<Value = RelativeParams> {
        (-1.0f64..1.0, -0.5f64..0.5).prop_map(move |(a, b)| RelativeParams::new(a, b, from, to))
    }

    proptest! {
        #[test]
        fn compose_is_associative(p1 in arb_params(0, 1), p2 in arb_params(1, 2), p3 in arb_params(2, 3)) {
            let left = compose(&compose(&p1, &p2).unwrap(), &p3).unwrap();
            let right = compose(&p1, &compose(&p2, &p3).unwrap()).unwrap();
            prop_assert!((left.a - right.a).abs() < EPS);
            prop_assert!((left.b - right.b).abs() < EPS);
        }

        #[test]
        fn identity_and_inverse(q in arb_params(0, 1)) {
            let left = compose(&RelativeParams::identity(0), &q).unwrap();
            let right = compose(&q, &RelativeParams::identity(1)).unwrap();
            prop_assert_eq!(left, q);
            prop_assert_eq!(right, q);
            let id = compose(&q, &q.inverse()).unwrap();
            prop_assert!(id.a.abs() < EPS && id.b.abs() < EPS);
        }

        #[test]
        fn forward_respects_composition(p1 in arb_params(0, 1), p2 in arb_params(1, 2), i in 0.0f64..1.0) {
            let direct = compose(&p1, &p2).unwrap().apply_forward(i);
            let stepwise = p2.apply_forward(p1.apply_forward(i));
            prop_assert!((direct - stepwise).abs() < 1e-10);
        }

        #[test]
        fn change_ref_agrees_with_oracle(c_i in arb_params(0, 2), c_prev in arb_params(0, 4), c_t in arb_params(0, 5)) {
            let i_to_t = compose(&c_i.inverse(), &c_t).unwrap();
            let got = change_ref(&i_to_t, &c_i, &c_prev).unwrap();
            let oracle = compose(&c_prev.inverse(), &c_t).unwrap();
            prop_assert!((got.a - oracle.a).abs() < EPS);
            prop_assert!((got.b - oracle.b).abs() < EPS);
        }

        #[test]
        fn drift_keeps_gap_floor(q in (-4.0f64..2.0, -3.0f64..3.0), xi_gap in 0.0f64..1.0, xi_base in 0.0f64..0.99) {
            let cfg = DriftConfig { xi_gap, xi_base, gap_floor: 0.05 };
            let out = adjust_for_drift(&RelativeParams::new(q.0, q.1, 0, 1), &cfg);
            prop_assert!(out.gap() >= 0.05 - 1e-12);
        }

        #[test]
        fn cyclic_gray_periodic(v in -50.0f64..50.0, k in -20i32..20) {
            let g = cyclic_gray(v);
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!((g - cyclic_gray(v + f64::from(k))).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_keeps_chain_bounded() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let cfg = DriftConfig::default();
        let mut entry = RelativeParams::identity(0);
        let mut worst_c: f64 = 0.0;
        let mut worst_b: f64 = 0.0;
        for t in 1..=10_000 {
            let step = RelativeParams::new(noise.sample(&mut rng), noise.sample(&mut rng), t - 1, t);
            entry = adjust_for_drift(&compose(&entry, &step).unwrap(), &cfg);
            worst_c = worst_c.max((entry.c() - 1.0).abs());
            worst_b = worst_b.max(entry.b.abs());
            assert!(entry.gap() >= cfg.gap_floor);
        }
        assert!(worst_c < 0.5 && worst_b < 0.5, "{worst_c} {worst_b}");
    }
}
