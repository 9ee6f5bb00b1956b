//! File-level stages: simulate, export, re-ingest, extract, ground truth,
//! features, evaluation and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, EvalConfig, EvalError, EvalMode, EvaluationReport, Target};
use crate::features::{self, FeatureError, FeatureSample, MIN_DAILY_COUNT, MIN_WINDOW_COUNT};
use crate::groundtruth::{self, GroundTruthConfig, GroundTruthError, GroundTruthOutput, LineGeometry};
use crate::ingest::{self, ClinicVisit, ExclusionCalendar, IngestError, SensorEvent};
use crate::simulator::{self, HouseholdConfig, SimError};
use crate::transitions::{self, TransitionError, TransitionRecord, DEFAULT_DWELL_CAP_S, DEFAULT_MIN_COUNT};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    GroundTruth(#[from] GroundTruthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn open(path: &Path) -> Result<fs::File, PipelineError> {
    fs::File::open(path).map_err(io_err(path))
}

pub fn create(path: &Path) -> Result<BufWriter<fs::File>, PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| fmt_err(path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| fmt_err(path, e))
}

/// Tunables shared by every stage after simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub tz_offset_minutes: i32,
    pub dwell_cap_s: f64,
    pub min_pair_count: usize,
    pub epsilon: f64,
    pub folds: usize,
    /// Clinical window lengths to evaluate when clinic data exist.
    pub window_days: Vec<u32>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            tz_offset_minutes: 0,
            dwell_cap_s: DEFAULT_DWELL_CAP_S,
            min_pair_count: DEFAULT_MIN_COUNT,
            epsilon: 0.1,
            folds: evaluation::DEFAULT_FOLDS,
            window_days: vec![15, 30],
        }
    }
}

impl AnalysisOptions {
    pub fn eval_config(&self, mode: EvalMode, seed: u64) -> EvalConfig {
        let mut cfg = EvalConfig::new(mode, seed);
        cfg.folds = self.folds;
        cfg.params.epsilon = self.epsilon;
        cfg
    }
}

/// Inputs to the analysis half of the pipeline.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyData {
    pub events: Vec<SensorEvent>,
    pub exclusions: Vec<ExclusionCalendar>,
    pub clinic: Vec<ClinicVisit>,
    pub geometry: Option<LineGeometry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub transitions: Vec<TransitionRecord>,
    pub ground_truth: GroundTruthOutput,
    pub daily_features: Vec<FeatureSample>,
    pub window_features: BTreeMap<u32, Vec<FeatureSample>>,
    pub daily_report: EvaluationReport,
    pub clinical_reports: BTreeMap<u32, EvaluationReport>,
}

/// Exclusions → day split → transitions → ground truth → features →
/// daily and clinical evaluation.
pub fn analyze(data: &StudyData, opts: &AnalysisOptions, seed: u64) -> Result<Analysis, PipelineError> {
    let kept = ingest::apply_calendars(&data.events, &data.exclusions, opts.tz_offset_minutes);
    let days = ingest::split_days(&kept, opts.tz_offset_minutes);
    let transitions = transitions::process_days(&days, opts.dwell_cap_s, opts.min_pair_count)?;
    let geometry = data
        .geometry
        .clone()
        .ok_or_else(|| GroundTruthError::Geometry("no line geometry".into()))?;
    let ground_truth = groundtruth::ground_truth(&days, &geometry, seed, &GroundTruthConfig::default())?;
    let daily_features = features::daily_features(&transitions, MIN_DAILY_COUNT);
    let targets: Vec<Target> = ground_truth.daily.iter().map(Target::from).collect();
    let daily_report = evaluation::evaluate(&daily_features, &targets, &opts.eval_config(EvalMode::Daily, seed))?;

    let mut window_features = BTreeMap::new();
    let mut clinical_reports = BTreeMap::new();
    if !data.clinic.is_empty() {
        let dates: Vec<(String, chrono::NaiveDate)> = data.clinic.iter().map(|c| (c.participant.clone(), c.date)).collect();
        let clinic_targets: Vec<Target> = data.clinic.iter().map(Target::from).collect();
        for &wd in &opts.window_days {
            let hw = features::half_width_for(wd)?;
            let feats = features::window_features(&transitions, &dates, hw, MIN_WINDOW_COUNT);
            let cfg = opts.eval_config(EvalMode::Clinical { window_days: wd }, seed);
            match evaluation::evaluate(&feats, &clinic_targets, &cfg) {
                Ok(r) => {
                    clinical_reports.insert(wd, r);
                }
                Err(EvalError::NoMatchedSamples) => {}
                Err(e) => return Err(e.into()),
            }
            window_features.insert(wd, feats);
        }
    }
    Ok(Analysis {
        transitions,
        ground_truth,
        daily_features,
        window_features,
        daily_report,
        clinical_reports,
    })
}

/// Reads an exported simulation directory back through the ingest parsers.
pub fn load_sim_dir(dir: &Path) -> Result<StudyData, PipelineError> {
    let p = dir.join("events.csv");
    let events = ingest::parse_event_csv(open(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = dir.join("exclusions.csv");
    let exclusions = ingest::parse_exclusion_csv(open(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = dir.join("clinic.csv");
    let clinic = ingest::parse_clinic_csv(open(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = dir.join("line.csv");
    let geometry = groundtruth::parse_line_geometry_csv(open(&p)?).map_err(|e| fmt_err(&p, e))?;
    Ok(StudyData {
        events,
        exclusions,
        clinic,
        geometry: Some(geometry),
    })
}

/// Households for a run: the config itself with `seed`, or a cohort.
pub fn households(base: &HouseholdConfig, n: usize, seed: u64) -> Vec<HouseholdConfig> {
    if n <= 1 {
        vec![HouseholdConfig {
            seed,
            ..base.clone()
        }]
    } else {
        simulator::cohort(base, n, seed)
    }
}

/// Simulates and exports every household under `out/sim/<participant>/`,
/// then re-reads the exports and merges them into one study.
pub fn simulate_study(configs: &[HouseholdConfig], days: u32, out: &Path) -> Result<StudyData, PipelineError> {
    let mut study = StudyData::default();
    for cfg in configs {
        let sim = simulator::simulate(cfg, days)?;
        let dir = out.join("sim").join(&cfg.participant);
        simulator::export(&sim, &dir)?;
        let loaded = load_sim_dir(&dir)?;
        if loaded.events != sim.events {
            return Err(fmt_err(&dir.join("events.csv"), "re-ingested events differ from the simulated stream"));
        }
        study.events.extend(loaded.events);
        study.exclusions.extend(loaded.exclusions);
        study.clinic.extend(loaded.clinic);
        if study.geometry.is_none() {
            study.geometry = loaded.geometry;
        } else if study.geometry != loaded.geometry {
            return Err(fmt_err(&dir.join("line.csv"), "households must share one line geometry"));
        }
    }
    study.exclusions.sort_by(|a, b| a.participant.cmp(&b.participant));
    study.clinic.sort_by(|a, b| (&a.participant, a.date).cmp(&(&b.participant, b.date)));
    Ok(study)
}

/// Writes every analysis artifact under `out`; returns the relative paths.
pub fn write_analysis(a: &Analysis, out: &Path) -> Result<Vec<String>, PipelineError> {
    let mut files = Vec::new();
    let mut rel = |name: &str| -> PathBuf {
        files.push(name.to_string());
        out.join(name)
    };
    let p = rel("transitions.csv");
    transitions::write_transition_csv(&a.transitions, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = rel("daily_velocity.csv");
    groundtruth::write_daily_velocity_csv(&a.ground_truth.daily, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = rel("qq.csv");
    groundtruth::write_qq_csv(&a.ground_truth.participants, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = rel("ground_truth.json");
    write_json(&p, &a.ground_truth.participants)?;
    let p = rel("features_daily.csv");
    features::write_feature_csv(&a.daily_features, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    for (wd, feats) in &a.window_features {
        let p = rel(&format!("features_window{wd}.csv"));
        features::write_feature_csv(feats, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    }
    let p = rel("report.json");
    write_json(&p, &a.daily_report)?;
    let p = rel("report.txt");
    fs::write(&p, render_report_text(&a.daily_report)).map_err(io_err(&p))?;
    for (wd, r) in &a.clinical_reports {
        let p = rel(&format!("report_clinical_{wd}.json"));
        write_json(&p, r)?;
        let p = rel(&format!("report_clinical_{wd}.txt"));
        fs::write(&p, render_report_text(r)).map_err(io_err(&p))?;
    }
    let p = rel("plots/fig4_kind_error.csv");
    evaluation::write_kind_error_csv(&a.daily_report.population, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = rel("plots/fig5_pred_vs_true.csv");
    evaluation::write_scatter_csv(a.daily_report.predicted_vs_true.as_ref(), create(&p)?).map_err(|e| fmt_err(&p, e))?;
    Ok(files)
}

/// Writes the two plot CSVs for a report into `dir`.
pub fn write_plots(report: &EvaluationReport, dir: &Path) -> Result<(), PipelineError> {
    let p = dir.join("fig4_kind_error.csv");
    evaluation::write_kind_error_csv(&report.population, create(&p)?).map_err(|e| fmt_err(&p, e))?;
    let p = dir.join("fig5_pred_vs_true.csv");
    evaluation::write_scatter_csv(report.predicted_vs_true.as_ref(), create(&p)?).map_err(|e| fmt_err(&p, e))
}

/// Plain-text summary of a report.
pub fn render_report_text(r: &EvaluationReport) -> String {
    let mut s = String::new();
    let mode = match r.config.mode {
        EvalMode::Daily => "daily".to_string(),
        EvalMode::Clinical { window_days } => format!("clinical, {window_days}-day windows"),
    };
    let _ = writeln!(s, "Prediction error ({mode}, {}-fold CV, seed {})", r.config.folds, r.config.seed);
    let _ = writeln!(
        s,
        "matched samples {}, unmatched features {}, unmatched targets {}, cells {}, skipped {}",
        r.matched_samples,
        r.unmatched_features,
        r.unmatched_targets,
        r.cells.len(),
        r.skipped.len()
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Population RMSE by feature (cm/s)");
    for k in &r.population.kinds {
        let _ = writeln!(s, "  {:<7}{:>8.3}  ({} participants)", k.kind.as_str(), k.population_rmse, k.participants);
    }
    let order: Vec<&str> = r.population.ordering.iter().map(|k| k.as_str()).collect();
    let _ = writeln!(s, "  ordering: {}", order.join(" < "));
    let _ = writeln!(s);
    let _ = writeln!(s, "Best room pair per participant and feature");
    for b in &r.population.table {
        let _ = writeln!(
            s,
            "  {:<8}{:<7}{:<28}{:.2} ± {:.2}",
            b.participant,
            b.kind.as_str(),
            b.pair.to_string(),
            b.rmse_mean,
            b.rmse_sd
        );
    }
    if let Some(pvt) = &r.predicted_vs_true {
        let _ = writeln!(s);
        match pvt.fit {
            Some(f) => {
                let _ = writeln!(
                    s,
                    "Predicted vs true ({}, {} points): slope {:.4}, intercept {:.3}, r² {:.4}",
                    pvt.kind.as_str(),
                    pvt.points.len(),
                    f.slope,
                    f.intercept,
                    f.r_squared
                );
            }
            None => {
                let _ = writeln!(s, "Predicted vs true: too few points for a fit");
            }
        }
    }
    for sk in &r.skipped {
        let _ = writeln!(s, "skipped {} {} {}: {}", sk.participant, sk.pair, sk.kind.as_str(), sk.reason);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub analysis: Analysis,
    /// Output files relative to the output directory.
    pub files: Vec<String>,
}

/// simulate → export → ingest → … → report, writing everything under `out`.
pub fn run(base: &HouseholdConfig, n_households: usize, days: u32, seed: u64, opts: &AnalysisOptions, out: &Path) -> Result<PipelineRun, PipelineError> {
    let configs = households(base, n_households, seed);
    let study = simulate_study(&configs, days, out)?;
    let opts = AnalysisOptions {
        tz_offset_minutes: base.tz_offset_minutes,
        ..opts.clone()
    };
    let analysis = analyze(&study, &opts, seed)?;
    let mut files: Vec<String> = Vec::new();
    for c in &configs {
        for f in simulator::EXPORT_FILES {
            files.push(format!("sim/{}/{f}", c.participant));
        }
    }
    files.extend(write_analysis(&analysis, out)?);
    Ok(PipelineRun { analysis, files })
}
