//! Command-line front end of the deepmatch engine.

pub mod config;
pub mod dataset;
pub mod selftest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use deepmatch::descriptors::GrayImage;
use deepmatch::io::{flow_to_color, read_flow, read_image, write_flow, write_image, ImageBuffer};
use deepmatch::matching::FlowField;
use deepmatch::pipeline::{match_images, Model};
use deepmatch::training::{
    evaluate, evaluate_flows, mean_loss, train, Checkpoint, CheckpointError, EpochLog, EvalItem, EvalReport,
    PairSample, TrainerState, ACCURACY_THRESHOLDS,
};
use deepmatch::{is_sentinel, ScoreMap};
use thiserror::Error;

use crate::config::RunConfig;

/// Failure classes; each maps to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Property(String),
    #[error("{0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Property(_) => 1,
            CliError::Io(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl From<deepmatch::Error> for CliError {
    fn from(e: deepmatch::Error) -> Self {
        use deepmatch::Error as E;
        match e {
            E::Config(m) | E::Geometry(m) => CliError::Config(m),
            E::Checkpoint(CheckpointError::Mismatch(m)) => CliError::Config(format!("checkpoint does not fit the model: {m}")),
            e @ (E::Read { .. } | E::Write { .. } | E::Pnm(_) | E::Flo(_) | E::Checkpoint(_) | E::ImageTooSmall { .. }) => {
                CliError::Io(e.to_string())
            }
            e => CliError::Property(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deepmatch", version, about = "Quasi-dense image matching with a trainable score pyramid")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (1 = bit-reproducible sequential run).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match two images and write matches, flow and a flow visualization.
    Match(MatchArgs),
    /// Train exponents and/or descriptor weights.
    Train(TrainArgs),
    /// Report accuracy and end-point error on a dataset.
    Eval(EvalArgs),
    /// Run the decoder-oracle and gradient-check property suites.
    Selftest(SelftestArgs),
    /// Write a synthetic dataset.
    Gen(GenArgs),
    /// Render a .flo file as a color PPM.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    pub image0: PathBuf,
    pub image1: PathBuf,
    /// Load trained parameters.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "matches.txt")]
    pub matches: PathBuf,
    #[arg(long, default_value = "flow.flo")]
    pub flow: PathBuf,
    #[arg(long, default_value = "flow.ppm")]
    pub viz: PathBuf,
    /// Dump the final score slice of reference cell ROW,COL as a PGM heatmap.
    #[arg(long, value_name = "ROW,COL")]
    pub dump_slice: Option<String>,
    #[arg(long, default_value = "slice.pgm")]
    pub dump_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Training dataset directory (default: generate from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset directory (default: generate from the config).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Resume from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// CSV log of per-epoch rows.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory (default: generate from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score the zero-flow estimator instead of the matcher.
    #[arg(long)]
    pub identity: bool,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Number of random pyramids in the oracle suite.
    #[arg(long, default_value_t = 200)]
    pub pyramids: usize,
    /// Number of gradcheck instances.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Descriptor weights sampled per gradcheck instance.
    #[arg(long, default_value_t = 64)]
    pub weights: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    pub out_dir: PathBuf,
    /// Number of pairs (default: gen_pairs from the config).
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    pub flow: PathBuf,
    pub out: PathBuf,
    /// Magnitude mapped to full saturation (default: largest valid magnitude).
    #[arg(long)]
    pub max_mag: Option<f64>,
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Usage errors are configuration errors; --help and --version succeed.
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 3;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "deepmatch: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // A second initialization (e.g. repeated in-process runs) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Match(a) => cmd_match(&cfg, &a, out),
        Command::Train(a) => cmd_train(&cfg, &a, out),
        Command::Eval(a) => cmd_eval(&cfg, &a, out),
        Command::Selftest(a) => cmd_selftest(&cfg, &a, out),
        Command::Gen(a) => cmd_gen(&cfg, &a, out),
        Command::Visualize(a) => cmd_visualize(&a, out),
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Io(format!("cannot write output: {e}"))
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model, CliError> {
    let mut model = cfg.model();
    if let Some(path) = checkpoint {
        TrainerState::from_checkpoint(&Checkpoint::load(path)?, &mut model)?;
    }
    Ok(model)
}

fn load_gray(path: &Path) -> Result<GrayImage, CliError> {
    Ok(GrayImage::from(&read_image(path)?))
}

/// Largest valid flow magnitude (at least 1).
fn max_magnitude(flow: &FlowField) -> f64 {
    (0..flow.len())
        .filter_map(|i| flow.get_index(i))
        .map(|[u, v]| u.hypot(v))
        .fold(1.0, f64::max)
}

/// Min-max normalized heatmap of one score slice; SENTINEL entries are black.
pub fn slice_heatmap(map: &ScoreMap, cell: [usize; 2]) -> Result<ImageBuffer, CliError> {
    if cell[0] >= map.rows() || cell[1] >= map.cols() {
        return Err(CliError::Config(format!(
            "--dump-slice {},{} is outside the {}x{} reference grid",
            cell[0],
            cell[1],
            map.rows(),
            map.cols()
        )));
    }
    let slice = map.slice(cell);
    let live = slice.iter().copied().filter(|v| !is_sentinel(*v));
    let (lo, hi) = live.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let data = slice
        .iter()
        .map(|v| if is_sentinel(*v) { 0 } else { ((v - lo) * scale).round() as u8 })
        .collect();
    Ok(ImageBuffer::gray(map.span(), map.span(), data)?)
}

fn parse_cell(s: &str) -> Result<[usize; 2], CliError> {
    let bad = || CliError::Config(format!("--dump-slice expects ROW,COL, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok([r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?])
}

pub fn cmd_match(cfg: &RunConfig, a: &MatchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cell = a.dump_slice.as_deref().map(parse_cell).transpose()?;
    let model = load_model(cfg, a.checkpoint.as_deref())?;
    let img0 = load_gray(&a.image0)?;
    let img1 = load_gray(&a.image1)?;
    let start = Instant::now();
    let result = match_images(&model, &img0, &img1)?;
    let elapsed = start.elapsed();
    std::fs::write(&a.matches, result.matches.to_text())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", a.matches.display())))?;
    write_flow(&a.flow, &result.flow)?;
    write_image(&a.viz, &flow_to_color(&result.flow, max_magnitude(&result.flow))?)?;
    if let Some(cell) = cell {
        write_image(&a.dump_out, &slice_heatmap(&result.q0, cell)?)?;
    }
    writeln!(
        out,
        "reference cells {}\nmatches {}\nverified {}\ndense pixels {}/{}\ntime {:.3}s",
        result.reference_cells,
        result.matches.len(),
        result.matches.verified_count(),
        result.flow.valid_count(),
        result.flow.len(),
        elapsed.as_secs_f64()
    )
    .map_err(io_err)
}

fn samples_or_generated(cfg: &RunConfig, dir: Option<&Path>, first: usize, count: usize) -> Result<Vec<PairSample>, CliError> {
    match dir {
        Some(d) => dataset::load_dataset(d),
        None => Ok(dataset::generate(cfg, first, count)?.iter().map(dataset::to_sample).collect()),
    }
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let train_set = samples_or_generated(cfg, a.data.as_deref(), 0, cfg.gen.pairs)?;
    let val_set = samples_or_generated(cfg, a.val.as_deref(), cfg.gen.pairs, cfg.val_pairs)?;
    let mut model = cfg.model();
    let mut state = match &a.resume {
        Some(path) => TrainerState::from_checkpoint(&Checkpoint::load(path)?, &mut model)?,
        None => TrainerState::new(&model),
    };
    if !val_set.is_empty() {
        let loss = mean_loss(&model, &val_set, &cfg.train.loss)?;
        writeln!(out, "initial validation loss {loss:.6}").map_err(io_err)?;
    }
    let logs = train(
        &mut model,
        &mut state,
        &train_set,
        &val_set,
        &cfg.train,
        Some(&a.out),
        &mut |_, _| {},
    )
    .map_err(|e| match e {
        deepmatch::Error::NonFinite(what) => CliError::Property(format!("training aborted: non-finite {what}")),
        e => e.into(),
    })?;
    // Zero epochs still leave a checkpoint of the initialization.
    if logs.is_empty() && !a.out.exists() {
        state.to_checkpoint(&model).save(&a.out)?;
    }
    writeln!(out, "{}", EpochLog::CSV_HEADER).map_err(io_err)?;
    for l in &logs {
        writeln!(out, "{}", l.to_csv()).map_err(io_err)?;
    }
    if let Some(path) = &a.log {
        let mut text = String::from(EpochLog::CSV_HEADER);
        text.push('\n');
        for l in &logs {
            text.push_str(&l.to_csv());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    let nus: Vec<String> = model.exponents.iter().map(|v| format!("{v:.4}")).collect();
    writeln!(out, "exponents {}", nus.join(",")).map_err(io_err)
}

pub fn format_report(r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = format!("{:<14}{:>10}\n", "metric", "value");
    for (t, acc) in ACCURACY_THRESHOLDS.iter().zip(r.accuracy) {
        s += &format!("{:<14}{:>10.4}\n", format!("acc@{t}"), acc);
    }
    s += &format!("{:<14}{:>10}\n", "EPE", opt(r.epe));
    s += &format!("{:<14}{:>10}\n", "EPE@matches", opt(r.epe_matches));
    s += &format!("{:<14}{:>10.4}\n", "coverage", r.coverage);
    s += &format!("{:<14}{:>10}\n", "matches", r.matches);
    s += &format!("{:<14}{:>10}\n", "verified", r.verified);
    s += &format!("{:<14}{:>10}\n", "pairs", r.pairs);
    s
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let samples = samples_or_generated(cfg, a.data.as_deref(), 0, cfg.gen.pairs)?;
    let report = if a.identity {
        let items: Vec<EvalItem> = samples
            .iter()
            .map(|s| EvalItem {
                estimate: FlowField::constant(s.flow.width(), s.flow.height(), [0.0, 0.0]),
                truth: s.flow.clone(),
                match_pixels: Vec::new(),
                matches: 0,
            })
            .collect();
        evaluate_flows(&items)?
    } else {
        evaluate(&load_model(cfg, a.checkpoint.as_deref())?, &samples)?
    };
    write!(out, "{}", format_report(&report)).map_err(io_err)
}

pub fn cmd_selftest(cfg: &RunConfig, a: &SelftestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let suites = [
        selftest::oracle_suite(cfg.seed, a.pyramids),
        selftest::gradcheck_suite(cfg.seed, a.instances, a.weights),
    ];
    let mut failed = 0;
    for s in &suites {
        let status = if s.passed() { "ok" } else { "FAILED" };
        writeln!(out, "{:<28} {:>4} cases  {status}", s.name, s.cases).map_err(io_err)?;
        for n in &s.notes {
            writeln!(out, "    {n}").map_err(io_err)?;
        }
        for f in &s.failures {
            writeln!(out, "    failure: {f}").map_err(io_err)?;
        }
        failed += s.failures.len();
    }
    if failed > 0 {
        return Err(CliError::Property(format!("selftest: {failed} property failures")));
    }
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig, a: &GenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let n = a.pairs.unwrap_or(cfg.gen.pairs);
    let pairs = dataset::generate(cfg, 0, n)?;
    dataset::write_dataset(&a.out_dir, &pairs)?;
    writeln!(out, "wrote {n} pairs to {}", a.out_dir.display()).map_err(io_err)
}

pub fn cmd_visualize(a: &VisualizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let flow = read_flow(&a.flow)?;
    let max_mag = a.max_mag.unwrap_or_else(|| max_magnitude(&flow));
    if !(max_mag > 0.0) {
        return Err(CliError::Config(format!("--max-mag must be positive, got {max_mag}")));
    }
    write_image(&a.out, &flow_to_color(&flow, max_mag)?)?;
    writeln!(out, "wrote {} ({}x{}, max magnitude {max_mag:.3})", a.out.display(), flow.width(), flow.height())
        .map_err(io_err)
}
