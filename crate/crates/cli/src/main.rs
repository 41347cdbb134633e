//! `photocal` — calibrate thermal sequences, generate synthetic ones, and
//! evaluate calibrations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use photocal::frame::Frame;
use photocal::io::{list_frames, read_frame, write_pgm, write_ppm, IoError};
use photocal::metrics::{evaluate, Reference};
use photocal::model::ParamChain;
use photocal::pipeline::{Calibrator, CorrespondenceSource, GridSettings, OutputMode, PipelineConfig, PipelineError};
use photocal::spatial::SpatialField;
use photocal::synth::{GroundTruth, Scene, SceneSpec};
use photocal::temporal::CorrespondenceSet;
use photocal::tracker::{ingest_correspondences, write_correspondences};

#[derive(Debug, Parser)]
#[command(name = "photocal", version, about = "Online photometric calibration for automatic-gain thermal video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate a directory of frames.
    Calibrate(CalibrateArgs),
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Score a calibration output directory.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of PGM/PNG frames, processed in file-name order.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// TOML pipeline config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// gray (cyclic ramp), clamp or palette.
    #[arg(long)]
    output_mode: Option<OutputMode>,
    /// Correspondence CSV to use instead of the built-in tracker.
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Spatial grid as COLSxROWS, e.g. 16x16.
    #[arg(long)]
    grid: Option<GridSettings>,
    #[arg(long)]
    xi_gap: Option<f64>,
    #[arg(long)]
    xi_base: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML scene description.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Overrides the scene's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Output directory of `calibrate`.
    #[arg(long)]
    input: PathBuf,
    /// Where to write report.json and report.csv; defaults to the input directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Ground truth from `synth`, enables parameter-recovery scores.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Correspondences to score on; defaults to those the calibration used.
    #[arg(long)]
    correspondences: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Internal(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Write { .. } | IoError::Encode { .. } => Self::Internal(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Self::Usage(e.to_string()),
            PipelineError::Dimensions { .. }
            | PipelineError::Order { .. }
            | PipelineError::Correspondences { .. }
            | PipelineError::Tracker(_) => Self::Data(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::Synth(args) => synth(args),
        Command::Eval(args) => eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn write_err(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

fn load_correspondences(path: &Path, bounds: Option<(usize, usize)>) -> Result<Vec<CorrespondenceSet>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    ingest_correspondences(BufReader::new(file), bounds).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn effective_config(args: &CalibrateArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            PipelineConfig::from_toml_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(mode) = args.output_mode {
        cfg.output_mode = mode;
    }
    if let Some(path) = &args.correspondences {
        cfg.correspondences = CorrespondenceSource::External { path: path.clone() };
    }
    if let Some(grid) = args.grid {
        cfg.grid = grid;
    }
    if let Some(x) = args.xi_gap {
        cfg.drift.xi_gap = x;
    }
    if let Some(x) = args.xi_base {
        cfg.drift.xi_base = x;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let cfg = effective_config(&args)?;
    let paths = list_frames(&args.input)?;
    let first = read_frame(&paths[0], 0)?;
    let bounds = Some((first.width(), first.height()));

    let mut external: Option<BTreeMap<usize, Vec<CorrespondenceSet>>> = match &cfg.correspondences {
        CorrespondenceSource::Tracker => None,
        CorrespondenceSource::External { path } => {
            let mut by_frame: BTreeMap<usize, Vec<CorrespondenceSet>> = BTreeMap::new();
            for set in load_correspondences(path, bounds)? {
                by_frame.entry(set.to_frame).or_default().push(set);
            }
            Some(by_frame)
        }
    };

    let frames_dir = args.output.join("frames");
    make_dir(&frames_dir)?;
    let mode = cfg.output_mode;
    let mut cal = Calibrator::new(cfg.clone())?;
    let mut used = Vec::new();
    for (index, path) in paths.iter().enumerate() {
        let frame = if index == 0 { first.clone() } else { read_frame(path, index)? };
        let sets = external.as_mut().map(|m| m.remove(&index).unwrap_or_default());
        let out = cal.push(&frame, sets)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let pixels = out.render(mode);
        match mode {
            OutputMode::Palette => write_ppm(&frames_dir.join(format!("{stem}.ppm")), frame.width(), frame.height(), &pixels)?,
            _ => write_pgm(&frames_dir.join(format!("{stem}.pgm")), frame.width(), frame.height(), &pixels)?,
        }
        used.extend(out.sets);
    }
    cal.finish();

    let chain = cal.chain().ok_or_else(|| CliError::Internal("no chain after calibration".into()))?;
    let path = args.output.join("chain.jsonl");
    chain.write_jsonl(create(&path)?).map_err(|e| write_err(&path)(e.to_string()))?;
    let path = args.output.join("chain.csv");
    chain.write_csv(create(&path)?).map_err(|e| write_err(&path)(e.to_string()))?;

    let path = args.output.join("untracked.txt");
    let mut w = create(&path)?;
    for f in chain.untracked_frames() {
        writeln!(w, "{f}").map_err(|e| write_err(&path)(e.to_string()))?;
    }
    w.flush().map_err(|e| write_err(&path)(e.to_string()))?;

    if let Some(field) = cal.field() {
        let path = args.output.join("spatial_field.json");
        field.write_json(create(&path)?).map_err(|e| write_err(&path)(e.to_string()))?;
        let g = field.grid;
        write_pgm(&args.output.join("spatial_field.pgm"), g.cells_x, g.cells_y, &field.visualization())?;
    }

    let path = args.output.join("correspondences.csv");
    write_correspondences(create(&path)?, &used).map_err(|e| write_err(&path)(e.to_string()))?;

    let path = args.output.join("timing.json");
    cal.timing().write_json(create(&path)?).map_err(|e| write_err(&path)(e.to_string()))?;

    let path = args.output.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| write_err(&path)(e.to_string()))?;

    let untracked = chain.untracked_frames().count();
    println!(
        "calibrated {} frames ({} untracked), {} spatial solves -> {}",
        paths.len(),
        untracked,
        cal.spatial_solves.len(),
        args.output.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    let spec = SceneSpec::from_toml_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    let seed = args.seed.unwrap_or(spec.seed);
    let scene = Scene::build(&spec, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let (frames, truth) = scene.render().map_err(|e| CliError::Data(e.to_string()))?;

    let frames_dir = args.output.join("frames");
    make_dir(&frames_dir)?;
    // correspondences read their intensities from the frames as written
    let mut stored = Vec::with_capacity(frames.len());
    for f in &frames {
        let bytes = f.to_u8();
        write_pgm(&frames_dir.join(format!("frame_{:06}.pgm", f.index())), f.width(), f.height(), &bytes)?;
        stored.push(Frame::from_u8(f.index(), f.width(), f.height(), &bytes).map_err(|e| CliError::Internal(e.to_string()))?);
    }
    let sets: Vec<CorrespondenceSet> = (0..stored.len()).flat_map(|t| scene.sets_into(&stored, t, seed)).collect();
    let path = args.output.join("correspondences.csv");
    write_correspondences(create(&path)?, &sets).map_err(|e| write_err(&path)(e.to_string()))?;

    let path = args.output.join("truth.json");
    fs::write(&path, truth.to_json()).map_err(|e| write_err(&path)(e.to_string()))?;
    let path = args.output.join("scene.toml");
    fs::write(&path, spec.to_toml_string()).map_err(|e| write_err(&path)(e.to_string()))?;

    println!("rendered {} frames ({} correspondence sets) -> {}", frames.len(), sets.len(), args.output.display());
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Data(format!("missing artifact {}", path.display())))
    }
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let chain_path = require(args.input.join("chain.jsonl"))?;
    let file = File::open(&chain_path).map_err(|e| CliError::Data(format!("{}: {e}", chain_path.display())))?;
    let records = ParamChain::read_jsonl(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", chain_path.display())))?;
    let chain = ParamChain::from_records(&records).map_err(|e| CliError::Data(format!("{}: {e}", chain_path.display())))?;

    let field_path = args.input.join("spatial_field.json");
    let field = if field_path.is_file() {
        let file = File::open(&field_path).map_err(|e| CliError::Data(format!("{}: {e}", field_path.display())))?;
        Some(SpatialField::read_json(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", field_path.display())))?)
    } else {
        None
    };

    let corr_path = require(args.correspondences.clone().unwrap_or_else(|| args.input.join("correspondences.csv")))?;
    let bounds = field.as_ref().map(|f| (f.grid.width, f.grid.height));
    let sets = load_correspondences(&corr_path, bounds)?;

    let truth = match &args.truth {
        Some(path) => {
            let path = require(path.clone())?;
            Some(GroundTruth::from_json(&read_text(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let truth_chain = truth.as_ref().map(GroundTruth::chain);
    let cell_bias = match (&truth, &field) {
        (Some(t), Some(f)) if (t.width, t.height) == (f.grid.width, f.grid.height) => Some(t.cell_bias(&f.grid)),
        _ => None,
    };
    let reference = truth_chain.as_ref().map(|chain| Reference {
        chain,
        cell_bias: cell_bias.as_deref(),
    });

    let report = evaluate(&sets, &chain, field.as_ref(), reference).map_err(|e| CliError::Data(format!("evaluation failed: {e}")))?;
    let out = args.output.unwrap_or(args.input);
    make_dir(&out)?;
    let path = out.join("report.json");
    report.write_json(create(&path)?).map_err(|e| write_err(&path)(e.to_string()))?;
    let path = out.join("report.csv");
    report.write_csv(create(&path)?).map_err(|e| write_err(&path)(e.to_string()))?;
    print!("{}", report.to_text());
    Ok(())
}
