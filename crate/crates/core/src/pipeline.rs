//! Streaming calibration: correspondences, temporal chain, periodic spatial
//! solve with GP completion, and per-frame corrected output.
//!
//! Frame `t`'s output depends only on frames up to `t`. The spatial field
//! used for a frame is the one solved at the most recent cadence point.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{quantize_u8, Frame};
use crate::gp::{complete_field, GpConfig, GpError};
use crate::model::{calibrate_pixel, cyclic_colormap, cyclic_gray, ColorPalette, DriftConfig, ModelError, ParamChain, RelativeParams};
use crate::spatial::{solve_trimmed, ConstraintAccumulator, TrimConfig, GridSpec, SpatialError, SpatialField};
use crate::temporal::{process_frame, CorrespondenceSet, RansacConfig, TemporalError};
use crate::tracker::{resample_missing, FeatureTracker, TrackerConfig, TrackerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("frame {index} is {width}x{height}, expected {expected_w}x{expected_h}")]
    Dimensions {
        index: usize,
        width: usize,
        height: usize,
        expected_w: usize,
        expected_h: usize,
    },
    #[error("frame {index} does not follow frame {last}")]
    Order { index: usize, last: usize },
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("correspondence set {from}->{to}: {reason}")]
    Correspondences { from: usize, to: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Cyclic grayscale ramp: values outside `[0, 1]` wrap instead of clipping.
    #[default]
    Gray,
    Clamp,
    /// Cyclic color palette, written as RGB.
    Palette,
}

impl std::str::FromStr for OutputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gray" | "grayscale-ramp" => Ok(Self::Gray),
            "clamp" => Ok(Self::Clamp),
            "palette" => Ok(Self::Palette),
            other => Err(format!("unknown output mode `{other}` (expected gray, clamp or palette)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrespondenceSource {
    Tracker,
    /// Correspondence CSV; sets are matched to frames by position index.
    External { path: std::path::PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    pub cells_x: usize,
    pub cells_y: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self { cells_x: 16, cells_y: 16 }
    }
}

impl std::str::FromStr for GridSettings {
    type Err = String;

    /// Parses `COLSxROWS`, e.g. `32x24`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (x, y) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid `{s}` is not COLSxROWS"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("grid `{s}`: {e}"));
        Ok(Self {
            cells_x: parse(x)?,
            cells_y: parse(y)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSettings {
    /// Kernel length scale in pixels; defaults to a quarter of the image width.
    pub length_scale: Option<f64>,
    pub signal_sigma: f64,
    pub noise_sigma: f64,
    pub max_training_points: usize,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            length_scale: None,
            signal_sigma: 0.05,
            noise_sigma: 0.005,
            max_training_points: 1024,
        }
    }
}

impl GpSettings {
    pub fn for_width(&self, width: usize, seed: u64) -> GpConfig {
        GpConfig {
            length_scale: self.length_scale.unwrap_or(0.25 * width as f64),
            signal_variance: self.signal_sigma * self.signal_sigma,
            noise_variance: self.noise_sigma * self.noise_sigma,
            max_training_points: self.max_training_points,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialSettings {
    pub enabled: bool,
    /// Solve after every this many frames.
    pub cadence: usize,
    /// Use the current field when producing output frames.
    pub apply_to_output: bool,
    pub trim: TrimConfig,
}

impl Default for SpatialSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            cadence: 50,
            apply_to_output: true,
            trim: TrimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Overrides the RANSAC and GP seeds when set.
    pub seed: Option<u64>,
    pub tracker: TrackerConfig,
    pub ransac: RansacConfig,
    pub drift: DriftConfig,
    pub grid: GridSettings,
    pub gp: GpSettings,
    pub spatial: SpatialSettings,
    pub output_mode: OutputMode,
    pub correspondences: CorrespondenceSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            tracker: TrackerConfig::default(),
            ransac: RansacConfig::default(),
            drift: DriftConfig::default(),
            grid: GridSettings::default(),
            gp: GpSettings::default(),
            spatial: SpatialSettings::default(),
            output_mode: OutputMode::Gray,
            correspondences: CorrespondenceSource::Tracker,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.tracker.validate().map_err(|e| cfg(e.to_string()))?;
        self.ransac.validate().map_err(|e| cfg(format!("ransac: {e}")))?;
        self.drift.validate().map_err(|e| cfg(format!("drift: {e}")))?;
        if self.grid.cells_x == 0 || self.grid.cells_y == 0 {
            return Err(cfg("grid: cell counts must be positive".into()));
        }
        if self.spatial.cadence == 0 {
            return Err(cfg("spatial.cadence must be positive".into()));
        }
        self.spatial.trim.validate().map_err(|e| cfg(format!("spatial.{e}")))?;
        let gp = self.gp.for_width(100, 0);
        gp.validate().map_err(|e| cfg(e.to_string()))?;
        if let Some(l) = self.gp.length_scale {
            if !(l > 0.0) {
                return Err(cfg("gp.length_scale must be positive".into()));
            }
        }
        Ok(())
    }

    fn ransac(&self) -> RansacConfig {
        let mut r = self.ransac;
        if let Some(seed) = self.seed {
            r.rng_seed = seed;
        }
        r
    }
}

/// Outcome of one spatial solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialSolve {
    pub after_frame: usize,
    pub millis: f64,
    pub constraints: usize,
    /// Constraints dropped by residual trimming.
    pub trimmed: usize,
    pub solved_cells: usize,
    pub completed_cells: usize,
    /// Why the field was not updated, if it was not.
    pub failure: Option<String>,
}

/// Per-frame result of [`Calibrator::push`].
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub frame: usize,
    /// Parameters mapping this frame to the first frame's intensities.
    pub entry: RelativeParams,
    pub untracked: bool,
    /// Correspondence sets that ended at this frame.
    pub sets: Vec<CorrespondenceSet>,
    pub temporal_millis: Option<f64>,
    pub spatial: Option<SpatialSolve>,
    /// Corrected intensities before output mapping.
    pub calibrated: Vec<f64>,
}

impl FrameOutput {
    /// 8-bit grayscale output for `Gray`/`Clamp`, interleaved RGB for `Palette`.
    pub fn render(&self, mode: OutputMode) -> Vec<u8> {
        match mode {
            OutputMode::Gray => self.calibrated.iter().map(|&v| quantize_u8(cyclic_gray(v))).collect(),
            OutputMode::Clamp => self.calibrated.iter().map(|&v| quantize_u8(v)).collect(),
            OutputMode::Palette => {
                let palette = ColorPalette::rainbow();
                self.calibrated
                    .iter()
                    .flat_map(|&v| cyclic_colormap(v, &palette).map(quantize_u8))
                    .collect()
            }
        }
    }
}

/// Wall-clock timings of a calibration run, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub frames: usize,
    pub temporal_mean_ms: Option<f64>,
    pub temporal_max_ms: Option<f64>,
    /// `(frame, ms)` per temporal estimate.
    pub temporal_ms: Vec<(usize, f64)>,
    pub spatial_solves: Vec<SpatialSolve>,
}

impl TimingReport {
    pub fn write_json<W: std::io::Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }
}

/// Online calibrator. Feed frames in order with [`push`](Self::push).
#[derive(Debug)]
pub struct Calibrator {
    cfg: PipelineConfig,
    ransac: RansacConfig,
    chain: Option<ParamChain>,
    tracker: Option<FeatureTracker>,
    size: Option<(usize, usize)>,
    grid: Option<GridSpec>,
    accumulator: Option<ConstraintAccumulator>,
    field: Option<SpatialField>,
    /// The previous `track_window` frames, for resampling external correspondences.
    recent: Vec<Frame>,
    frames_seen: usize,
    pub temporal_millis: Vec<(usize, f64)>,
    pub spatial_solves: Vec<SpatialSolve>,
}

impl Calibrator {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let tracker = match cfg.correspondences {
            CorrespondenceSource::Tracker => Some(FeatureTracker::new(cfg.tracker)?),
            CorrespondenceSource::External { .. } => None,
        };
        Ok(Self {
            ransac: cfg.ransac(),
            cfg,
            chain: None,
            tracker,
            size: None,
            grid: None,
            accumulator: None,
            field: None,
            recent: Vec::new(),
            frames_seen: 0,
            temporal_millis: Vec::new(),
            spatial_solves: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn chain(&self) -> Option<&ParamChain> {
        self.chain.as_ref()
    }

    pub fn field(&self) -> Option<&SpatialField> {
        self.field.as_ref()
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.grid.as_ref()
    }

    /// Processes the next frame. `external` supplies the correspondence sets
    /// ending at this frame; it is required when the config uses an external
    /// source and ignored otherwise. Missing intensities are resampled.
    pub fn push(&mut self, frame: &Frame, external: Option<Vec<CorrespondenceSet>>) -> Result<FrameOutput, PipelineError> {
        let (w, h) = (frame.width(), frame.height());
        match self.size {
            None => {
                let grid = GridSpec::new(self.cfg.grid.cells_x, self.cfg.grid.cells_y, w, h)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                self.size = Some((w, h));
                self.grid = Some(grid);
                self.accumulator = Some(ConstraintAccumulator::new(grid));
            }
            Some((ew, eh)) if (ew, eh) != (w, h) => {
                return Err(PipelineError::Dimensions {
                    index: frame.index(),
                    width: w,
                    height: h,
                    expected_w: ew,
                    expected_h: eh,
                });
            }
            _ => {}
        }
        let index = frame.index();

        let mut sets = match &mut self.tracker {
            Some(t) => t.advance(frame)?,
            None => external.unwrap_or_default(),
        };
        if self.tracker.is_none() {
            let window = self.cfg.tracker.track_window;
            sets.retain(|s| s.from_frame < index && index - s.from_frame <= window);
            for s in &mut sets {
                if s.to_frame != index {
                    return Err(PipelineError::Correspondences {
                        from: s.from_frame,
                        to: s.to_frame,
                        reason: format!("does not end at frame {index}"),
                    });
                }
                if let Some(from) = self.recent.iter().find(|f| f.index() == s.from_frame) {
                    resample_missing(s, from, frame);
                }
                s.validate(Some((w, h))).map_err(|e| PipelineError::Correspondences {
                    from: s.from_frame,
                    to: s.to_frame,
                    reason: e.to_string(),
                })?;
            }
        }

        let (entry, untracked, temporal_millis) = match &mut self.chain {
            None => {
                self.chain = Some(ParamChain::new(index));
                sets.clear();
                (RelativeParams::identity(index), false, None)
            }
            Some(chain) => {
                if index <= chain.last_frame() {
                    return Err(PipelineError::Order {
                        index,
                        last: chain.last_frame(),
                    });
                }
                // sets from frames the chain does not know carry no information
                sets.retain(|s| chain.get(s.from_frame).is_some());
                let start = Instant::now();
                let est = process_frame(&sets, index, chain, &self.ransac, &self.cfg.drift)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                self.temporal_millis.push((index, ms));
                (est.entry, est.untracked, Some(ms))
            }
        };
        self.frames_seen += 1;

        let chain = self.chain.as_ref().expect("chain exists after the first frame");
        if self.cfg.spatial.enabled {
            let acc = self.accumulator.as_mut().expect("initialized with the first frame");
            for s in &sets {
                acc.add_set(s, chain);
            }
        }
        let spatial = if self.cfg.spatial.enabled && self.frames_seen % self.cfg.spatial.cadence == 0 {
            Some(self.solve_spatial(index))
        } else {
            None
        };

        let sampler = match (&self.field, self.cfg.spatial.apply_to_output) {
            (Some(f), true) => Some(f.bias_sampler()),
            _ => None,
        };
        let chain = self.chain.as_ref().expect("chain exists");
        let params = *chain.get(index).expect("frame was just appended");
        let calibrated = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let r = sampler.as_ref().map_or(0.0, |s| s.at(x as f64, y as f64));
                calibrate_pixel(frame.get(x, y), &params, r)
            })
            .collect();

        if self.tracker.is_none() {
            self.recent.push(frame.clone());
            let keep = self.cfg.tracker.track_window;
            if self.recent.len() > keep {
                self.recent.remove(0);
            }
        }
        Ok(FrameOutput {
            frame: index,
            entry,
            untracked,
            sets,
            temporal_millis,
            spatial,
            calibrated,
        })
    }

    /// Solves the spatial field from all constraints so far; on failure the
    /// previous field is kept.
    pub fn solve_spatial(&mut self, after_frame: usize) -> SpatialSolve {
        let start = Instant::now();
        let acc = self.accumulator.as_ref().expect("solve after the first frame");
        let grid = *acc.grid();
        let constraints = acc.constraints();
        let gp = self.cfg.gp.for_width(grid.width, self.cfg.seed.unwrap_or(0));
        let result: Result<(SpatialField, usize), String> = solve_trimmed(&constraints, &grid, &self.cfg.spatial.trim)
            .map_err(|e: SpatialError| e.to_string())
            .and_then(|(field, trimmed)| {
                if field.is_complete() {
                    Ok((field, trimmed))
                } else {
                    complete_field(&field, &gp).map(|f| (f, trimmed)).map_err(|e: GpError| e.to_string())
                }
            });
        let millis = start.elapsed().as_secs_f64() * 1e3;
        let solve = match result {
            Ok((field, trimmed)) => {
                let solved = field.solved_cells().count();
                let completed = grid.cell_count() - solved;
                self.field = Some(field);
                SpatialSolve {
                    after_frame,
                    millis,
                    constraints: constraints.len(),
                    trimmed,
                    solved_cells: solved,
                    completed_cells: completed,
                    failure: None,
                }
            }
            Err(reason) => SpatialSolve {
                after_frame,
                millis,
                constraints: constraints.len(),
                trimmed: 0,
                solved_cells: 0,
                completed_cells: 0,
                failure: Some(reason),
            },
        };
        self.spatial_solves.push(solve.clone());
        solve
    }

    pub fn timing(&self) -> TimingReport {
        let ms: Vec<f64> = self.temporal_millis.iter().map(|&(_, m)| m).collect();
        TimingReport {
            frames: self.frames_seen,
            temporal_mean_ms: (!ms.is_empty()).then(|| ms.iter().sum::<f64>() / ms.len() as f64),
            temporal_max_ms: ms.iter().copied().reduce(f64::max),
            temporal_ms: self.temporal_millis.clone(),
            spatial_solves: self.spatial_solves.clone(),
        }
    }

    /// Final spatial solve over everything seen, if spatial estimation is on
    /// and the last frame was not already a cadence point.
    pub fn finish(&mut self) -> Option<SpatialSolve> {
        if !self.cfg.spatial.enabled || self.frames_seen == 0 || self.frames_seen % self.cfg.spatial.cadence == 0 {
            return None;
        }
        let last = self.chain.as_ref().map_or(0, ParamChain::last_frame);
        Some(self.solve_spatial(last))
    }
}
