//! The `archoscope` command line: synthesize traces, extract architectures,
//! compare architectures and export spectrograms.

pub mod config;
mod spectro;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use archoscope::arch::{diff, Architecture, TensorShape};
use archoscope::emulator::{emulate_inference, layer_nodes, render_trace, EventClass, EventNode};
use archoscope::extraction::{extract_architecture, ExtractionReport, LayerHypothesis};
use archoscope::trace::Trace;
use clap::{Args, Parser, Subcommand};

use config::{ExtractConfig, FileConfig, SpectroConfig, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIFFERENT: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SYNTH: i32 = 3;
pub const EXIT_UNRESOLVED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "archoscope",
    version,
    about = "Emulated EM traces of CMSIS-NN inference and blind architecture recovery"
)]
pub struct Cli {
    /// JSON config file whose keys mirror the long flags (default: $ARCHOSCOPE_CONFIG).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emulate an architecture and render its trace.
    Synth(SynthArgs),
    /// Recover the architecture behind a trace.
    Extract(ExtractArgs),
    /// Compare two architecture files field by field.
    Diff(DiffArgs),
    /// Export a spectrogram as CSV or PNG.
    Spectro(SpectroArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub arch: PathBuf,
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise standard deviation of one raw acquisition.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of acquisitions averaged.
    #[arg(long)]
    pub average: Option<u32>,
    /// Embed the ground-truth event tree.
    #[arg(long)]
    pub annotate: bool,
    #[arg(long, value_name = "FILE")]
    pub cost_model: Option<PathBuf>,
    /// Full render parameters (amplitudes, carriers, sample rate).
    #[arg(long, value_name = "FILE")]
    pub render: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub trace: PathBuf,
    /// Input tensor as HxC, e.g. 28x1.
    #[arg(long)]
    pub input_shape: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Extraction configuration (detector thresholds, assumed costs).
    #[arg(long, value_name = "FILE")]
    pub thresholds: Option<PathBuf>,
    /// Assumed cost model; overrides the one in the thresholds.
    #[arg(long, value_name = "FILE")]
    pub cost_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub left: PathBuf,
    pub right: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpectroArgs {
    pub trace: PathBuf,
    /// Output path; the extension selects CSV or PNG.
    pub out: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
}

/// An error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

trait Code<T> {
    fn code(self, code: i32) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for std::result::Result<T, E> {
    fn code(self, code: i32) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Runs the CLI on `args` (including the program name), printing to stdout
/// and stderr, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let file = FileConfig::discover(cli.config.as_deref()).code(EXIT_INPUT)?;
    match cli.command {
        Command::Synth(a) => synth(a, file),
        Command::Extract(a) => extract(a, file),
        Command::Diff(a) => diff_cmd(a),
        Command::Spectro(a) => spectro_cmd(a, file),
    }
}

fn read_arch(path: &Path) -> Result<Architecture> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Architecture::from_json(&text).with_context(|| format!("invalid architecture {}", path.display()))
}

fn read_trace(path: &Path) -> Result<Trace> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Trace::from_bytes(&data).with_context(|| format!("invalid trace {}", path.display()))
}

pub fn parse_shape(s: &str) -> Result<TensorShape> {
    let (h, c) = s.split_once(['x', 'X']).ok_or_else(|| anyhow!("input shape must be HxC, got {s:?}"))?;
    let shape = TensorShape::new(h.trim().parse()?, c.trim().parse()?);
    if shape.is_empty() {
        bail!("input shape must be non-empty, got {s:?}");
    }
    Ok(shape)
}

pub fn synth_config(a: &SynthArgs, file: FileConfig) -> Result<SynthConfig> {
    let cost_model = match (&a.cost_model, file.cost_model) {
        (Some(p), _) => config::read_json(p)?,
        (None, Some(c)) => c.load()?,
        (None, None) => Default::default(),
    };
    cost_model.validate()?;
    let mut render = match (&a.render, file.render) {
        (Some(p), _) => config::read_json(p)?,
        (None, Some(r)) => r.load()?,
        (None, None) => archoscope::emulator::RenderParams::default(),
    };
    let seed = a.seed.or(file.seed).unwrap_or(render.rng_seed);
    let noise = a.noise.or(file.noise).unwrap_or(render.noise_sigma);
    let average = a.average.or(file.average).unwrap_or(render.n_average);
    render.rng_seed = seed;
    render.noise_sigma = noise;
    render.n_average = average;
    render.validate()?;
    let annotate = a.annotate || file.annotate.unwrap_or(false);
    Ok(SynthConfig { seed, noise, average, annotate, cost_model, render })
}

/// Per-layer duration and event counts of an emulated inference.
pub fn summarize(root: &EventNode) -> String {
    let mut out = String::new();
    for layer in layer_nodes(root) {
        let _ = write!(out, "{:<44} {:>12.2} us", layer.label, layer.duration);
        for class in EventClass::ALL {
            let n = layer.count_class(class);
            if n > 0 && class != EventClass::LayerGap {
                let _ = write!(out, "  {class:?}={n}");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(out, "total {:.2} us", root.duration);
    out
}

fn synth(a: SynthArgs, file: FileConfig) -> Outcome {
    let cfg = synth_config(&a, file).code(EXIT_INPUT)?;
    let arch = read_arch(&a.arch).code(EXIT_INPUT)?;
    let root = emulate_inference(&arch, &cfg.cost_model).code(EXIT_SYNTH)?;
    let mut trace = render_trace(&root, &cfg.render).code(EXIT_SYNTH)?;
    if cfg.annotate {
        trace.annotation = Some(root.clone());
    }
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display())).code(EXIT_INPUT)?;
    let mut w = BufWriter::new(f);
    trace.write_to(&mut w).code(EXIT_INPUT)?;
    w.flush().code(EXIT_INPUT)?;
    print!("{}", summarize(&root));
    println!("{} samples at {} Hz -> {}", trace.len(), trace.sample_rate, a.out.display());
    Ok(EXIT_OK)
}

pub fn extract_config(a: &ExtractArgs, file: FileConfig) -> Result<ExtractConfig> {
    let mut thresholds = match (&a.thresholds, file.thresholds) {
        (Some(p), _) => config::read_json(p)?,
        (None, Some(t)) => t.load()?,
        (None, None) => Default::default(),
    };
    match (&a.cost_model, file.cost_model) {
        (Some(p), _) => thresholds.cost = config::read_json(p)?,
        (None, Some(c)) => thresholds.cost = c.load()?,
        (None, None) => {}
    }
    thresholds.cost.validate()?;
    let input_shape =
        a.input_shape.clone().or(file.input_shape).ok_or_else(|| anyhow!("--input-shape HxC is required"))?;
    parse_shape(&input_shape)?;
    Ok(ExtractConfig { input_shape, report: a.report.clone().or(file.report), thresholds })
}

fn params_text(h: &LayerHypothesis) -> String {
    serde_json::to_string(&h.params).unwrap_or_default()
}

/// Human-readable table of an extraction report.
pub fn report_table(r: &ExtractionReport) -> String {
    let mut out = format!("{:>5}  {:<10}  {:>10}  params\n", "layer", "kind", "confidence");
    for (i, h) in r.hypotheses.iter().enumerate() {
        let _ = writeln!(out, "{:>5}  {:<10}  {:>10.2}  {}", i + 1, h.kind.to_string(), h.confidence, params_text(h));
    }
    for e in &r.errors {
        let _ = writeln!(out, "error: {e}");
    }
    let _ = writeln!(out, "{}", if r.resolved { "resolved" } else { "unresolved" });
    out
}

fn extract(a: ExtractArgs, file: FileConfig) -> Outcome {
    let cfg = extract_config(&a, file).code(EXIT_INPUT)?;
    let shape = parse_shape(&cfg.input_shape).code(EXIT_INPUT)?;
    let trace = read_trace(&a.trace).code(EXIT_INPUT)?;
    let report = extract_architecture(&trace, shape, &cfg.thresholds);
    if let Some(path) = &cfg.report {
        let mut value = serde_json::to_value(&report).code(EXIT_INPUT)?;
        value["effective_config"] = serde_json::to_value(&cfg).code(EXIT_INPUT)?;
        let text = serde_json::to_string_pretty(&value).code(EXIT_INPUT)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display())).code(EXIT_INPUT)?;
    }
    print!("{}", report_table(&report));
    Ok(if report.resolved { EXIT_OK } else { EXIT_UNRESOLVED })
}

fn diff_cmd(a: DiffArgs) -> Outcome {
    let left = read_arch(&a.left).code(EXIT_INPUT)?;
    let right = read_arch(&a.right).code(EXIT_INPUT)?;
    let d = diff(&left, &right);
    for line in &d {
        println!("{line}");
    }
    Ok(if d.is_empty() { EXIT_OK } else { EXIT_DIFFERENT })
}

fn spectro_cmd(a: SpectroArgs, file: FileConfig) -> Outcome {
    let d = SpectroConfig::default();
    let cfg = SpectroConfig {
        window: a.window.or(file.window).unwrap_or(d.window),
        hop: a.hop.or(file.hop).unwrap_or(d.hop),
    };
    let trace = read_trace(&a.trace).code(EXIT_INPUT)?;
    let spec = archoscope::signal::spectrogram(&trace, cfg.window, cfg.hop).code(EXIT_INPUT)?;
    let ext = a.out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("csv") => spectro::write_csv(&spec, &a.out),
        Some("png") => spectro::write_png(&spec, &a.out),
        _ => Err(anyhow!("output must end in .csv or .png: {}", a.out.display())),
    }
    .code(EXIT_INPUT)?;
    println!("{} frames x {} bins -> {}", spec.n_frames, spec.n_bins, a.out.display());
    Ok(EXIT_OK)
}
