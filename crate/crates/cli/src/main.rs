//! `gaitspeed` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gaitspeed::evaluation::{self, EvalError, EvalMode, EvaluationReport, Target};
use gaitspeed::features::{self, FeatureKind, MIN_DAILY_COUNT, MIN_WINDOW_COUNT};
use gaitspeed::groundtruth::{self, GroundTruthConfig};
use gaitspeed::ingest::{self, CLINIC_HEADER};
use gaitspeed::pipeline::{self, AnalysisOptions};
use gaitspeed::simulator::{self, HouseholdConfig};
use gaitspeed::svr::{self, default_c_grid, grid_search_c, SvrParams};
use gaitspeed::transitions::{self, RoomPair};

const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "gaitspeed", version, about = "Gait velocity estimation from in-home room transition times")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate households and export their event streams and truth files.
    Simulate(SimulateArgs),
    /// Validate an event file and drop excluded days.
    Ingest(IngestArgs),
    /// Extract censored, frequency-filtered room transitions.
    ExtractTransitions(ExtractArgs),
    /// Daily ground-truth velocities from the sensor line.
    GroundTruth(GroundTruthArgs),
    /// Per-day or per-window transition-time features.
    Features(FeaturesArgs),
    /// Fit one SVR model for a single room pair and feature.
    Train(TrainArgs),
    /// Cross-validated evaluation of every room pair and feature.
    Evaluate(EvaluateArgs),
    /// Render a report.json as text plus plot CSVs.
    Report(ReportArgs),
    /// simulate, ingest, extract, ground truth, features and evaluate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Household config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    days: u32,
    #[arg(long)]
    seed: u64,
    /// Number of households; more than one derives a seeded cohort.
    #[arg(long, default_value_t = 1)]
    households: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    exclusions: Option<PathBuf>,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    tz_offset_minutes: i32,
    /// Cleaned event CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the clinic visits found in the stream.
    #[arg(long)]
    clinic_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    exclusions: Option<PathBuf>,
    #[arg(long, default_value_t = transitions::DEFAULT_DWELL_CAP_S)]
    cap_seconds: f64,
    #[arg(long, default_value_t = transitions::DEFAULT_MIN_COUNT)]
    min_count: usize,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    tz_offset_minutes: i32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GroundTruthArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    line_geometry: PathBuf,
    #[arg(long)]
    exclusions: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    tz_offset_minutes: i32,
    #[arg(long)]
    out: PathBuf,
    /// Paired theoretical and sample quantiles per participant.
    #[arg(long)]
    qq_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum FeatureMode {
    Daily,
    Window,
}

#[derive(Debug, Args, Serialize)]
struct FeaturesArgs {
    #[arg(long)]
    transitions: PathBuf,
    #[arg(long, value_enum, default_value_t = FeatureMode::Daily)]
    mode: FeatureMode,
    #[arg(long, default_value_t = 15)]
    window_days: u32,
    /// Clinic visits whose dates center the windows.
    #[arg(long)]
    clinic: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// Daily velocity CSV or clinic CSV.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    kind: FeatureKind,
    /// Room pair as `from:to`.
    #[arg(long)]
    pair: String,
    /// Required when the features cover several participants.
    #[arg(long)]
    participant: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Penalty weight; without it C is chosen by seeded k-fold grid search.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = evaluation::DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TargetMode {
    Daily,
    Clinical,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetMode::Daily)]
    mode: TargetMode,
    #[arg(long, default_value_t = 15)]
    window_days: u32,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = evaluation::DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plots_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Text report; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plots_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    days: u32,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    households: usize,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = evaluation::DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Everything needed to replay a run: the resolved arguments, the content
/// hash of every input and the tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    seed: Option<u64>,
    /// Command line that reproduces the run.
    argv: Vec<String>,
    config: serde_json::Value,
    /// Input path → SHA-256 of its contents.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    pipeline::create(path).map_err(Into::into)
}

struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    fn new<A: Serialize>(subcommand: &str, seed: Option<u64>, args: &A) -> Result<Self> {
        Ok(Self {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                argv: std::env::args().skip(1).collect(),
                config: serde_json::to_value(args)?,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
            },
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let d = digest(path)?;
        self.manifest.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    fn resolved<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        if let serde_json::Value::Object(map) = &mut self.manifest.config {
            map.insert(key.to_string(), serde_json::to_value(value)?);
        }
        Ok(())
    }

    /// Writes `<dir>/manifest.json`.
    fn write_dir(mut self, dir: &Path, outputs: Vec<String>) -> Result<()> {
        self.manifest.outputs = outputs;
        pipeline::write_json(&dir.join(MANIFEST_NAME), &self.manifest)?;
        Ok(())
    }

    /// Writes `<file>.manifest.json` next to a single output file.
    fn write_beside(mut self, out: &Path, extra: &[&Path]) -> Result<()> {
        self.manifest.outputs = std::iter::once(out).chain(extra.iter().copied()).map(|p| p.display().to_string()).collect();
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        pipeline::write_json(&out.with_file_name(name), &self.manifest)?;
        Ok(())
    }
}

fn load_household(path: &Path, rec: &mut Recorder) -> Result<HouseholdConfig> {
    rec.input(path)?;
    let text = read_to_string(path)?;
    let cfg = HouseholdConfig::from_toml(&text).with_context(|| format!("config {}", path.display()))?;
    rec.resolved("household", &cfg)?;
    Ok(cfg)
}

fn load_events(path: &Path, rec: &mut Recorder) -> Result<Vec<ingest::SensorEvent>> {
    rec.input(path)?;
    ingest::parse_event_csv(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_exclusions(path: Option<&Path>, rec: &mut Recorder) -> Result<Vec<ingest::ExclusionCalendar>> {
    match path {
        Some(p) => {
            rec.input(p)?;
            ingest::parse_exclusion_csv(open(p)?).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(Vec::new()),
    }
}

fn load_features(path: &Path, rec: &mut Recorder) -> Result<Vec<features::FeatureSample>> {
    rec.input(path)?;
    features::parse_feature_csv(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Reads daily-velocity or clinic targets, told apart by the header.
fn load_targets(path: &Path, rec: &mut Recorder) -> Result<Vec<Target>> {
    rec.input(path)?;
    let text = read_to_string(path)?;
    let first = text.lines().next().unwrap_or("");
    if first.split(',').eq(CLINIC_HEADER.iter().copied()) {
        let visits = ingest::parse_clinic_csv(text.as_bytes()).with_context(|| format!("parsing {}", path.display()))?;
        Ok(visits.iter().map(Target::from).collect())
    } else {
        let daily = groundtruth::parse_daily_velocity_csv(text.as_bytes()).with_context(|| format!("parsing {}", path.display()))?;
        Ok(daily.iter().map(Target::from).collect())
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut rec = Recorder::new("simulate", Some(a.seed), a)?;
    let base = load_household(&a.config, &mut rec)?;
    let configs = pipeline::households(&base, a.households, a.seed);
    let mut outputs = Vec::new();
    for cfg in &configs {
        let sim = simulator::simulate(cfg, a.days)?;
        let (dir, prefix) = if configs.len() == 1 {
            (a.out_dir.clone(), String::new())
        } else {
            (a.out_dir.join(&cfg.participant), format!("{}/", cfg.participant))
        };
        simulator::export(&sim, &dir)?;
        outputs.extend(simulator::EXPORT_FILES.iter().map(|f| format!("{prefix}{f}")));
    }
    rec.write_dir(&a.out_dir, outputs)
}

fn ingest_cmd(a: &IngestArgs) -> Result<()> {
    let mut rec = Recorder::new("ingest", None, a)?;
    let events = load_events(&a.input, &mut rec)?;
    let excl = load_exclusions(a.exclusions.as_deref(), &mut rec)?;
    let kept = ingest::apply_calendars(&events, &excl, a.tz_offset_minutes);
    ingest::write_event_csv(&kept, create(&a.out)?).with_context(|| format!("writing {}", a.out.display()))?;
    let mut extra: Vec<&Path> = Vec::new();
    if let Some(p) = &a.clinic_out {
        let visits = ingest::clinic_visits(&kept, a.tz_offset_minutes);
        ingest::write_clinic_csv(&visits, create(p)?).with_context(|| format!("writing {}", p.display()))?;
        extra.push(p);
    }
    eprintln!("kept {} of {} events", kept.len(), events.len());
    rec.write_beside(&a.out, &extra)
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let mut rec = Recorder::new("extract-transitions", None, a)?;
    let events = load_events(&a.input, &mut rec)?;
    let excl = load_exclusions(a.exclusions.as_deref(), &mut rec)?;
    let kept = ingest::apply_calendars(&events, &excl, a.tz_offset_minutes);
    let days = ingest::split_days(&kept, a.tz_offset_minutes);
    let records = transitions::process_days(&days, a.cap_seconds, a.min_count)?;
    transitions::write_transition_csv(&records, create(&a.out)?).with_context(|| format!("writing {}", a.out.display()))?;
    rec.write_beside(&a.out, &[])
}

fn ground_truth(a: &GroundTruthArgs) -> Result<()> {
    let mut rec = Recorder::new("ground-truth", Some(a.seed), a)?;
    let events = load_events(&a.input, &mut rec)?;
    rec.input(&a.line_geometry)?;
    let geometry = groundtruth::parse_line_geometry_csv(open(&a.line_geometry)?)
        .with_context(|| format!("parsing {}", a.line_geometry.display()))?;
    let excl = load_exclusions(a.exclusions.as_deref(), &mut rec)?;
    let kept = ingest::apply_calendars(&events, &excl, a.tz_offset_minutes);
    let days = ingest::split_days(&kept, a.tz_offset_minutes);
    let cfg = GroundTruthConfig::default();
    rec.resolved("ground_truth", &cfg)?;
    let out = groundtruth::ground_truth(&days, &geometry, a.seed, &cfg)?;
    for p in &out.participants {
        if let Some(reason) = &p.skipped {
            eprintln!("{}: {reason}", p.participant);
        }
    }
    groundtruth::write_daily_velocity_csv(&out.daily, create(&a.out)?).with_context(|| format!("writing {}", a.out.display()))?;
    let mut extra: Vec<&Path> = Vec::new();
    if let Some(q) = &a.qq_report {
        groundtruth::write_qq_csv(&out.participants, create(q)?).with_context(|| format!("writing {}", q.display()))?;
        extra.push(q);
    }
    rec.write_beside(&a.out, &extra)
}

fn features_cmd(a: &FeaturesArgs) -> Result<()> {
    let mut rec = Recorder::new("features", None, a)?;
    rec.input(&a.transitions)?;
    let records = transitions::parse_transition_csv(open(&a.transitions)?).with_context(|| format!("parsing {}", a.transitions.display()))?;
    let samples = match a.mode {
        FeatureMode::Daily => features::daily_features(&records, MIN_DAILY_COUNT),
        FeatureMode::Window => {
            let clinic = a.clinic.as_deref().ok_or_else(|| anyhow!("--mode window needs --clinic"))?;
            rec.input(clinic)?;
            let visits = ingest::parse_clinic_csv(open(clinic)?).with_context(|| format!("parsing {}", clinic.display()))?;
            let dates: Vec<_> = visits.iter().map(|v| (v.participant.clone(), v.date)).collect();
            let hw = features::half_width_for(a.window_days)?;
            features::window_features(&records, &dates, hw, MIN_WINDOW_COUNT)
        }
    };
    features::write_feature_csv(&samples, create(&a.out)?).with_context(|| format!("writing {}", a.out.display()))?;
    rec.write_beside(&a.out, &[])
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::new("train", Some(a.seed), a)?;
    let pair = RoomPair::parse(&a.pair).ok_or_else(|| anyhow!("--pair must look like `from:to`, got `{}`", a.pair))?;
    let samples = load_features(&a.features, &mut rec)?;
    let targets = load_targets(&a.targets, &mut rec)?;
    let selected: Vec<_> = samples
        .iter()
        .filter(|s| s.kind == a.kind && s.pair == pair && a.participant.as_ref().is_none_or(|p| *p == s.participant))
        .collect();
    let mut people: Vec<&str> = selected.iter().map(|s| s.participant.as_str()).collect();
    people.dedup();
    if people.len() > 1 {
        bail!("features cover {} participants; choose one with --participant", people.len());
    }
    let lookup: BTreeMap<_, f64> = targets.iter().map(|t| ((t.participant.as_str(), t.date), t.velocity)).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = selected
        .iter()
        .filter_map(|s| lookup.get(&(s.participant.as_str(), s.scope.date())).map(|v| (s.value, *v)))
        .unzip();
    if x.is_empty() {
        return Err(EvalError::NoMatchedSamples.into());
    }
    let base = SvrParams {
        epsilon: a.epsilon,
        ..SvrParams::default()
    };
    let c = match a.c {
        Some(c) => c,
        None => {
            let folds = evaluation::kfold_split(x.len(), a.folds.min(x.len()), a.seed)?;
            grid_search_c(&x, &y, &folds, &default_c_grid(), &base)?.best_c
        }
    };
    rec.resolved("resolved_c", &c)?;
    let model = svr::train(&x, &y, &base.with_c(c))?;
    pipeline::write_json(&a.out, &model)?;
    eprintln!("trained on {} samples, C = {c}", x.len());
    rec.write_beside(&a.out, &[])
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut rec = Recorder::new("evaluate", Some(a.seed), a)?;
    let samples = load_features(&a.features, &mut rec)?;
    let targets = load_targets(&a.targets, &mut rec)?;
    let mode = match a.mode {
        TargetMode::Daily => EvalMode::Daily,
        TargetMode::Clinical => EvalMode::Clinical {
            window_days: a.window_days,
        },
    };
    let opts = AnalysisOptions {
        epsilon: a.epsilon,
        folds: a.folds,
        ..AnalysisOptions::default()
    };
    let cfg = opts.eval_config(mode, a.seed);
    let report = evaluation::evaluate(&samples, &targets, &cfg)?;
    pipeline::write_json(&a.out, &report)?;
    let mut extra: Vec<PathBuf> = Vec::new();
    if let Some(dir) = &a.plots_dir {
        pipeline::write_plots(&report, dir)?;
        extra.push(dir.join("fig4_kind_error.csv"));
        extra.push(dir.join("fig5_pred_vs_true.csv"));
    }
    print!("{}", pipeline::render_report_text(&report));
    let extra: Vec<&Path> = extra.iter().map(PathBuf::as_path).collect();
    rec.write_beside(&a.out, &extra)
}

fn report(a: &ReportArgs) -> Result<()> {
    let report: EvaluationReport = pipeline::read_json(&a.input)?;
    if report.schema_version != evaluation::REPORT_SCHEMA_VERSION {
        bail!(
            "{}: report schema {} is not supported (expected {})",
            a.input.display(),
            report.schema_version,
            evaluation::REPORT_SCHEMA_VERSION
        );
    }
    let text = pipeline::render_report_text(&report);
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(dir) = &a.plots_dir {
        pipeline::write_plots(&report, dir)?;
    }
    if let Some(p) = &a.out {
        let mut rec = Recorder::new("report", None, a)?;
        rec.input(&a.input)?;
        rec.write_beside(p, &[])?;
    }
    Ok(())
}

fn pipeline_cmd(a: &PipelineArgs) -> Result<()> {
    let mut rec = Recorder::new("pipeline", Some(a.seed), a)?;
    let base = load_household(&a.config, &mut rec)?;
    let opts = AnalysisOptions {
        epsilon: a.epsilon,
        folds: a.folds,
        ..AnalysisOptions::default()
    };
    rec.resolved("analysis", &opts)?;
    let run = pipeline::run(&base, a.households, a.days, a.seed, &opts, &a.out_dir)?;
    print!("{}", pipeline::render_report_text(&run.analysis.daily_report));
    rec.write_dir(&a.out_dir, run.files)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::ExtractTransitions(a) => extract(a),
        Command::GroundTruth(a) => ground_truth(a),
        Command::Features(a) => features_cmd(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
