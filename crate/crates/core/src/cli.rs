//! Command-line front end: `synth`, `analyze`, `classify` and `sweep`.
//!
//! One TOML run configuration feeds every command. Flags override the
//! `EMSCALE_OUTPUT_DIR` / `EMSCALE_THREADS` environment variables, which
//! override the file.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::detect::{classify, render_report, DetectionThresholds, ReportFormat};
use crate::error::{Error, Result};
use crate::persistence::{analyze, sensitivity_sweep, stability_maps, AnalysisConfig, PersistenceProfile};
use crate::spectral::{write_spectrogram_csv, Stft};
use crate::synthgen::{generate, BaselineParams, LiParams, RoParams, Scenario, ScenarioConfig};
use crate::trace::{load_trace_dir, normalize_traces, write_trace_set, TraceSet};

pub const DEFAULT_OUTPUT_DIR: &str = "emscale-out";

/// Inline synthetic input. Unset fields take the scenario defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub scenario: Scenario,
    /// Generator seed; defaults to the analysis master seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_executions: Option<usize>,
    #[serde(default)]
    pub trace_length: Option<usize>,
    #[serde(default)]
    pub sampling_rate: Option<f64>,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub baseline: Option<BaselineParams>,
    #[serde(default)]
    pub li: Option<LiParams>,
    #[serde(default)]
    pub ro: Option<RoParams>,
}

impl SynthSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            seed: None,
            n_executions: None,
            trace_length: None,
            sampling_rate: None,
            noise_sigma: None,
            baseline: None,
            li: None,
            ro: None,
        }
    }

    pub fn resolve(&self, default_seed: u64) -> Result<ScenarioConfig> {
        let mut c = ScenarioConfig::default_for(self.scenario, self.seed.unwrap_or(default_seed));
        if let Some(n) = self.n_executions {
            c.n_executions = n;
        }
        if let Some(l) = self.trace_length {
            c.trace_length = l;
        }
        if let Some(r) = self.sampling_rate {
            c.sampling_rate = r;
        }
        if let Some(s) = self.noise_sigma {
            c.noise_sigma = s;
        }
        if let Some(b) = &self.baseline {
            c.baseline = b.clone();
        }
        if self.li.is_some() {
            c.li = self.li.clone();
        }
        if self.ro.is_some() {
            c.ro = self.ro.clone();
        }
        let c = c.with_scenario_defaults();
        c.validate()?;
        Ok(c)
    }
}

/// Exactly one of `dir` and `synth`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Directory of per-execution CSVs with a sidecar.
    pub dir: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub json: bool,
    pub csv: bool,
    pub svg: bool,
    /// Spectrogram and stability-map CSV dumps.
    pub dumps: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            json: true,
            csv: true,
            svg: false,
            dumps: false,
        }
    }
}

impl EmitFlags {
    fn formats(&self) -> Vec<ReportFormat> {
        let mut f = Vec::new();
        if self.json {
            f.push(ReportFormat::Json);
        }
        if self.csv {
            f.push(ReportFormat::Csv);
        }
        if self.svg {
            f.push(ReportFormat::Svg);
        }
        f
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub analysis: AnalysisConfig,
    pub thresholds: DetectionThresholds,
    pub output_dir: Option<PathBuf>,
    /// Worker bound; 0 or unset uses every core. Never changes results.
    pub threads: Option<usize>,
    pub emit: EmitFlags,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// What produced the traces, as echoed into output documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEcho {
    Dir(PathBuf),
    Synth(ScenarioConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub tool_version: String,
    pub input: InputEcho,
}

/// Profile JSON as written by `analyze` and `sweep`. The extra `run` member
/// is ignored when the file is read back as a plain profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    #[serde(flatten)]
    pub profile: PersistenceProfile,
    pub run: RunEcho,
}

#[derive(Debug, Parser)]
#[command(name = "emscale", version, about = "Cross-scale persistence analysis of repeated-execution EM traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace set.
    Synth(SynthArgs),
    /// Compute the persistence profile of a trace set.
    Analyze(AnalyzeArgs),
    /// Classify a persistence profile and render the report.
    Classify(ClassifyArgs),
    /// Analyze at several k_max bounds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with a synthetic scenario (same keys as `[input.synth]`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long = "n")]
    pub n_executions: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, env = "EMSCALE_OUTPUT_DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "EMSCALE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace directory (replaces the configured input).
    #[arg(long, conflicts_with = "scenario")]
    pub input: Option<PathBuf>,
    /// Synthesize this scenario in memory (replaces the configured input).
    #[arg(long)]
    pub scenario: Option<Scenario>,
    /// Executions to synthesize with `--scenario`.
    #[arg(long = "n", requires = "scenario")]
    pub n_executions: Option<usize>,
    /// Samples per synthesized execution.
    #[arg(long, requires = "scenario")]
    pub length: Option<usize>,
    /// Analysis master seed (also the generator seed unless configured).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_init: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Trace normalization: none | per-trace-zscore.
    #[arg(long)]
    pub normalize: Option<String>,
    /// Frequency axis of the features: linear | normal-quantile.
    #[arg(long)]
    pub frequency_scale: Option<String>,
    #[arg(long)]
    pub no_log1p: bool,
    #[arg(long)]
    pub no_standardize: bool,
    /// Write spectrogram and stability-map CSV dumps.
    #[arg(long)]
    pub dump: bool,
    #[arg(long, env = "EMSCALE_OUTPUT_DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "EMSCALE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub k_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "8,10,12")]
    pub k_max_list: Vec<usize>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub sat_high: Option<f64>,
    #[arg(long)]
    pub sat_low: Option<f64>,
    #[arg(long)]
    pub var_low: Option<f64>,
    #[arg(long)]
    pub decay_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub trend_tau_max: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, t: &mut DetectionThresholds) {
        let pairs = [
            (self.sat_high, &mut t.sat_high),
            (self.sat_low, &mut t.sat_low),
            (self.var_low, &mut t.var_low),
            (self.decay_min, &mut t.decay_min),
            (self.trend_tau_max, &mut t.trend_tau_max),
        ];
        for (v, slot) in pairs {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Profile JSON written by `analyze`.
    #[arg(long)]
    pub profile: PathBuf,
    /// Run configuration supplying thresholds, emit flags and output directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report formats, comma-separated (overrides the configured emit flags).
    #[arg(long, value_delimiter = ',')]
    pub format: Option<Vec<ReportFormat>>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long, env = "EMSCALE_OUTPUT_DIR")]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Classify(a) => cmd_classify(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("invalid {what} {value:?}")))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::new(
            args.scenario
                .ok_or_else(|| Error::Config("either --scenario or --config is required".into()))?,
        ),
    };
    if let Some(s) = args.scenario {
        if s != spec.scenario {
            spec = SynthSpec { scenario: s, li: None, ro: None, ..spec };
        }
    }
    spec.n_executions = args.n_executions.or(spec.n_executions);
    spec.trace_length = args.length.or(spec.trace_length);
    spec.seed = args.seed.or(spec.seed);
    spec.noise_sigma = args.noise.or(spec.noise_sigma);
    let config = spec.resolve(0)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));

    with_threads(args.threads, || {
        let set = generate(&config)?;
        write_trace_set(&set, &out, Some(&config))
    })?;
    println!(
        "synthesized {} executions x {} samples, scenario {}, seed {} -> {}",
        config.n_executions,
        config.trace_length,
        config.scenario,
        config.master_seed,
        out.display()
    );
    Ok(())
}

/// Effective configuration after file, environment and flags.
pub fn resolve_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &args.input {
        rc.input = InputConfig { dir: Some(dir.clone()), synth: None };
    }
    if let Some(s) = args.scenario {
        let keep = rc.input.synth.take().filter(|spec| spec.scenario == s);
        rc.input = InputConfig {
            dir: None,
            synth: Some(keep.unwrap_or_else(|| SynthSpec::new(s))),
        };
    }
    if let Some(spec) = rc.input.synth.as_mut() {
        spec.n_executions = args.n_executions.or(spec.n_executions);
        spec.trace_length = args.length.or(spec.trace_length);
    }
    let a = &mut rc.analysis;
    if let Some(seed) = args.seed {
        a.master_seed = seed;
    }
    if let Some(w) = &args.windows {
        a.window_sizes = w.clone();
    }
    if let Some(b) = args.batch_size {
        a.batch_size = b;
    }
    if let Some(n) = args.n_init {
        a.em.n_init = n;
    }
    if let Some(t) = args.tol {
        a.em.tol = t;
    }
    if let Some(n) = &args.normalize {
        a.normalize = parse_enum("normalization", n)?;
    }
    if let Some(f) = &args.frequency_scale {
        a.transform.frequency_scale = parse_enum("frequency scale", f)?;
    }
    if args.no_log1p {
        a.transform.log1p = false;
    }
    if args.no_standardize {
        a.transform.standardize = false;
    }
    if args.dump {
        rc.emit.dumps = true;
    }
    if args.out.is_some() {
        rc.output_dir = args.out.clone();
    }
    if args.threads.is_some() {
        rc.threads = args.threads;
    }
    match (&rc.input.dir, &rc.input.synth) {
        (Some(_), None) | (None, Some(_)) => Ok(rc),
        (None, None) => Err(Error::Config("no input: give --input, --scenario or an [input] table".into())),
        (Some(_), Some(_)) => Err(Error::Config("input has both a directory and a synthetic scenario".into())),
    }
}

fn load_input(rc: &RunConfig) -> Result<(TraceSet, InputEcho)> {
    match (&rc.input.dir, &rc.input.synth) {
        (Some(dir), None) => Ok((load_trace_dir(dir)?, InputEcho::Dir(dir.clone()))),
        (None, Some(spec)) => {
            let config = spec.resolve(rc.analysis.master_seed)?;
            Ok((generate(&config)?, InputEcho::Synth(config)))
        }
        _ => Err(Error::Config("exactly one input source is required".into())),
    }
}

fn output_dir(rc: &RunConfig) -> PathBuf {
    rc.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn profile_json(profile: &PersistenceProfile, input: &InputEcho) -> String {
    let doc = ProfileDocument {
        profile: profile.clone(),
        run: RunEcho {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input: input.clone(),
        },
    };
    serde_json::to_string_pretty(&doc).expect("profile document serializes") + "\n"
}

fn write_dumps(set: &TraceSet, config: &AnalysisConfig, dir: &Path) -> Result<()> {
    let dir = dir.join("dumps");
    create_dir(&dir)?;
    let normalized = normalize_traces(set, config.normalize)?;
    let first = &normalized.traces()[0];
    for &w in &config.window_sizes {
        let spec = Stft::new(config.stft_config(w)).magnitude(first)?;
        let path = dir.join(format!("spectrogram_w{w}_exec{:05}.csv", first.execution_id()));
        write_file(&path, |f| write_spectrogram_csv(f, &spec).map_err(|e| Error::io(&path, e)))?;
        for (b, map) in stability_maps(set, w, config)?.iter().enumerate() {
            let path = dir.join(format!("stability_w{w}_b{b:03}.csv"));
            write_file(&path, |f| map.write_csv(f).map_err(|e| Error::io(&path, e)))?;
        }
    }
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut rc = resolve_run_config(&args.run)?;
    if let Some(k) = args.k_max {
        rc.analysis.k_max = k;
    }
    let out = output_dir(&rc);
    let (set, input) = load_input(&rc)?;
    rc.analysis.validate(&set)?;
    create_dir(&out)?;

    let profile = with_threads(rc.threads, || {
        let profile = analyze(&set, &rc.analysis)?;
        if rc.emit.dumps {
            write_dumps(&set, &rc.analysis, &out)?;
        }
        Ok(profile)
    })?;
    if rc.emit.json {
        write_text(&out.join("profile.json"), &profile_json(&profile, &input))?;
    }
    if rc.emit.csv {
        let path = out.join("metrics.csv");
        write_file(&path, |f| profile.write_csv(f))?;
    }
    info!("profile written to {}", out.display());
    println!(
        "analyzed {} executions at {} window sizes, k_max {} -> {}",
        profile.n_executions,
        profile.scale_profiles.len(),
        profile.k_max,
        out.display()
    );
    Ok(())
}

fn read_profile(path: &Path) -> Result<PersistenceProfile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PersistenceProfile::from_json(&text).map_err(|e| match e {
        Error::Malformed(m) => Error::Malformed(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn cmd_classify(args: &ClassifyArgs) -> Result<()> {
    let rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut thresholds = rc.thresholds;
    args.thresholds.apply(&mut thresholds);
    thresholds.validate()?;
    let formats = match &args.format {
        Some(f) => f.clone(),
        None => rc.emit.formats(),
    };
    let out = args.out.clone().or(rc.output_dir).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));

    let profile = read_profile(&args.profile)?;
    let report = classify(&profile, &thresholds);
    if !formats.is_empty() {
        create_dir(&out)?;
    }
    for f in formats {
        let path = out.join(format!("report.{}", f.extension()));
        write_file(&path, |w| render_report(&report, &profile, f, w))?;
    }
    println!("{}", report.verdict);
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut rc = resolve_run_config(&args.run)?;
    args.thresholds.apply(&mut rc.thresholds);
    rc.thresholds.validate()?;
    if args.k_max_list.is_empty() {
        return Err(Error::Config("--k-max-list is empty".into()));
    }
    let out = output_dir(&rc);
    let (set, input) = load_input(&rc)?;
    rc.analysis.validate(&set)?;
    create_dir(&out)?;

    let profiles = with_threads(rc.threads, || sensitivity_sweep(&set, &args.k_max_list, &rc.analysis))?;
    let mut rows = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Malformed(e.to_string());
    rows.write_record(["k_max", "window_size", "saturation_ratio", "within_window_variance", "median_complexity"])
        .map_err(csv_err)?;
    for profile in &profiles {
        let k = profile.k_max;
        if rc.emit.json {
            write_text(&out.join(format!("profile_k{k}.json")), &profile_json(profile, &input))?;
        }
        let report = classify(profile, &rc.thresholds);
        for f in rc.emit.formats() {
            let path = out.join(format!("report_k{k}.{}", f.extension()));
            write_file(&path, |w| render_report(&report, profile, f, w))?;
        }
        for s in &profile.scale_profiles {
            rows.write_record([
                k.to_string(),
                s.window_size.to_string(),
                format!("{:?}", s.saturation_ratio),
                format!("{:?}", s.within_window_variance),
                format!("{:?}", s.median_complexity),
            ])
            .map_err(csv_err)?;
        }
        println!("k_max {k}: {}", report.verdict);
    }
    let bytes = rows.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
    let path = out.join("sweep.csv");
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
