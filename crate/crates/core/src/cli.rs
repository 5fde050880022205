//! Command-line workflows.
//!
//! Settings resolve in three layers: built-in defaults, then command-line
//! flags, then the JSON file given with `--config`, which wins. Every JSON
//! output embeds a [`RunManifest`] with the resolved settings.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cycle::{DischargeCycle, ReferenceCycle, SynchronizedCycle, VoltageWindow};
use crate::detector::{DetectorConfig, KneeDetector, Phase, Verdict};
use crate::dtw::synchronize;
use crate::error::{Error, Result};
use crate::fleet::{Category, ClassifyMode, FleetModel, FleetPoint, GmmConfig};
use crate::io::{self, Artifact, BatteryData, RunManifest};
use crate::matrix_profile::CycleAnchor;
use crate::soh::{self, RegressorConfig, SohModel, TrainingMeta, TrainingMode};
use crate::synth::{self, SynthSpec};

pub const KIND_SYNTH_TRUTH: &str = "synth_truth";
pub const KIND_DETECT: &str = "detect_report";
pub const KIND_FLEET: &str = "fleet_model";
pub const KIND_MODEL: &str = "soh_model";
pub const KIND_ESTIMATE: &str = "estimate_report";

#[derive(Debug, Parser)]
#[command(name = "knee-onset", version, about = "Battery knee-onset detection and SOH estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic batteries as CSV.
    Synth(SynthArgs),
    /// Detect the knee onset of every battery in a CSV file.
    Detect(DetectArgs),
    /// Fit the EOL line and long/short-range categories from knee and EOL cycles.
    Fleet(FleetArgs),
    /// Train an SOH model on one battery.
    Train(TrainArgs),
    /// Detect, classify and estimate SOH for every battery in a CSV file.
    Estimate(EstimateArgs),
    /// Turn a JSON report into a plot-ready CSV and a text summary.
    Report(ReportArgs),
}

/// Settings shared by every command after all layers are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub nominal_capacity: f64,
    pub eol_threshold: f64,
    pub voltage_window: VoltageWindow,
    pub detector: DetectorConfig,
    pub regressor: RegressorConfig,
    pub gmm: GmmConfig,
    pub classify_mode: ClassifyMode,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            nominal_capacity: 1.1,
            eol_threshold: 0.8,
            voltage_window: VoltageWindow::default(),
            detector: DetectorConfig::default(),
            regressor: RegressorConfig::default(),
            gmm: GmmConfig::default(),
            classify_mode: ClassifyMode::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON settings file; its values override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub nominal_capacity: Option<f64>,
    #[arg(long)]
    pub eol_threshold: Option<f64>,
    #[arg(long)]
    pub voltage_min: Option<f64>,
    #[arg(long)]
    pub voltage_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnchorArg {
    Start,
    End,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectorArgs {
    #[arg(long)]
    pub warmup_cycles: Option<usize>,
    #[arg(long)]
    pub cycle_lag: Option<usize>,
    #[arg(long)]
    pub ucl_sigma_multiplier: Option<f64>,
    #[arg(long, value_enum)]
    pub anchor: Option<AnchorArg>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RegressorArgs {
    /// Comma-separated LSTM layer sizes, e.g. 16,32.
    #[arg(long, value_delimiter = ',')]
    pub lstm_layer_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub dense_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    Short,
    Long,
    Stationary,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "short")]
    pub category: SynthKind,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Seed of the first battery; the others use the following seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Length of stationary batteries.
    #[arg(long, default_value_t = 2000)]
    pub cycles: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write planted knee and EOL cycles.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassifyArg {
    KneeMarginal,
    EolBoundary,
}

#[derive(Debug, Args)]
pub struct FleetArgs {
    /// A detect report (JSON) or a CSV table `battery_id,knee_onset,eol`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub gmm_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub classify_mode: Option<ClassifyArg>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Needed when the input holds more than one battery.
    #[arg(long)]
    pub battery: Option<String>,
    /// Knee onset cycle; detected when omitted.
    #[arg(long)]
    pub knee: Option<u32>,
    /// EOL cycle; taken from the SOH threshold when omitted.
    #[arg(long)]
    pub eol: Option<u32>,
    /// long_range or short_range; derived from --fleet when omitted.
    #[arg(long)]
    pub category: Option<Category>,
    #[arg(long)]
    pub fleet: Option<PathBuf>,
    /// Train on every cycle up to EOL instead of knee onset to EOL.
    #[arg(long)]
    pub full_life: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub regressor: RegressorArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub fleet: PathBuf,
    /// SOH model files; the first one for each category is used.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Plot-ready `battery_id,cycle,truth,estimate` table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl CommonArgs {
    fn apply(&self, s: &mut Settings) {
        if let Some(v) = self.nominal_capacity {
            s.nominal_capacity = v;
        }
        if let Some(v) = self.eol_threshold {
            s.eol_threshold = v;
        }
        if let Some(v) = self.voltage_min {
            s.voltage_window.min = v;
        }
        if let Some(v) = self.voltage_max {
            s.voltage_window.max = v;
        }
    }
}

impl DetectorArgs {
    fn apply(&self, s: &mut Settings) {
        let d = &mut s.detector;
        if let Some(v) = self.warmup_cycles {
            d.warmup_cycles = v;
        }
        if let Some(v) = self.cycle_lag {
            d.cycle_lag = v;
        }
        if let Some(v) = self.ucl_sigma_multiplier {
            d.ucl_sigma_multiplier = v;
        }
        if let Some(a) = self.anchor {
            d.anchor = match a {
                AnchorArg::Start => CycleAnchor::Start,
                AnchorArg::End => CycleAnchor::End,
            };
        }
    }
}

impl RegressorArgs {
    fn apply(&self, s: &mut Settings) {
        let r = &mut s.regressor;
        if let Some(v) = &self.lstm_layer_sizes {
            r.lstm_layer_sizes = v.clone();
        }
        if let Some(v) = self.dense_size {
            r.dense_size = v;
        }
        if let Some(v) = self.learning_rate {
            r.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            r.epochs = v;
        }
        if let Some(v) = self.batch_size {
            r.batch_size = v;
        }
        if let Some(v) = self.patience {
            r.patience = v;
        }
        if let Some(v) = self.seed {
            r.seed = v;
        }
    }
}

/// Overlays `top` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut Value, top: &Value, path: &str) -> Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Usage(format!("unknown config key '{here}'"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Defaults, then flags, then the config file.
pub fn resolve_settings(common: &CommonArgs, flags: impl FnOnce(&mut Settings)) -> Result<Settings> {
    let mut s = Settings::default();
    common.apply(&mut s);
    flags(&mut s);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(io::IoError::File {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| {
            Error::Io(io::IoError::Json {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })?;
        let mut base = serde_json::to_value(&s).expect("settings serialize");
        merge(&mut base, &file, "")?;
        s = serde_json::from_value(base).map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
    }
    s.detector.validate()?;
    s.regressor.validate()?;
    if !(s.nominal_capacity > 0.0 && s.eol_threshold > 0.0) {
        return Err(Error::Usage("nominal_capacity and eol_threshold must be > 0".into()));
    }
    if !(s.voltage_window.min < s.voltage_window.max) {
        return Err(Error::Usage("voltage window must satisfy min < max".into()));
    }
    Ok(s)
}

fn manifest(command: &str, settings: &Settings, inputs: &[&Path]) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, settings);
    for p in inputs {
        m.hash_input(p)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub battery_id: String,
    pub knee_cycle: Option<u32>,
    pub eol_cycle: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub cycle: u32,
    pub verdict: Verdict,
    pub evaluated: Option<u32>,
    pub profile_value: Option<f64>,
    pub profile_index: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryDetection {
    pub battery_id: String,
    pub cycles: usize,
    pub cycles_processed: usize,
    pub knee_onset: Option<u32>,
    /// Cycle on whose receipt the knee onset was confirmed.
    pub detected_at: Option<u32>,
    pub phase: Phase,
    pub ucl: Option<f64>,
    pub eol: Option<u32>,
    pub status: String,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub batteries: Vec<BatteryDetection>,
}

/// Runs warm-up and monitoring over one battery's stream.
pub fn detect_battery(data: &BatteryData, settings: &Settings) -> Result<BatteryDetection> {
    let cfg = &settings.detector;
    let mut det = KneeDetector::new(cfg.clone())?;
    let mut trace = Vec::with_capacity(data.cycles.len());
    let mut detected_at = None;
    for cycle in &data.cycles {
        let verdict = det.step(cycle)?;
        let eval = det.last_evaluation().filter(|e| e.received == cycle.cycle_number());
        trace.push(TraceEntry {
            cycle: cycle.cycle_number(),
            verdict,
            evaluated: eval.map(|e| e.evaluated),
            profile_value: eval.map(|e| e.profile_value),
            profile_index: eval.map(|e| e.profile_index),
        });
        if let Verdict::KneeOnset(_) = verdict {
            detected_at = Some(cycle.cycle_number());
            break;
        }
    }
    let knee_onset = det.knee_onset();
    let status = match (knee_onset, det.phase()) {
        (Some(k), _) => format!("knee onset at cycle {k}"),
        (None, Phase::WarmingUp) => format!(
            "warming up: {} of {} warm-up cycles received; no knee onset",
            data.cycles.len(),
            cfg.warmup_cycles
        ),
        (None, _) => "no knee onset".to_string(),
    };
    let eol = data
        .soh
        .as_ref()
        .and_then(|s| synth::label_eol(s, settings.eol_threshold).ok())
        .map(|c| c as u32);
    Ok(BatteryDetection {
        battery_id: data.battery_id.clone(),
        cycles: data.cycles.len(),
        cycles_processed: trace.len(),
        knee_onset,
        detected_at,
        phase: det.phase(),
        ucl: det.ucl(),
        eol,
        status,
        trace,
    })
}

/// Warped trajectories of every cycle against the battery's first cycle.
pub fn synchronize_all(cycles: &[DischargeCycle]) -> Result<Vec<SynchronizedCycle>> {
    let first = cycles
        .first()
        .ok_or_else(|| Error::Usage("battery has no cycles".into()))?;
    let reference = ReferenceCycle::new(first.clone())?;
    Ok(cycles
        .iter()
        .map(|c| synchronize(&reference, c))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleEstimate {
    pub cycle: u32,
    pub estimate: f64,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEstimate {
    pub battery_id: String,
    pub knee_onset: Option<u32>,
    pub category: Option<Category>,
    /// Training battery of the model that was used.
    pub model_battery: Option<String>,
    pub status: String,
    pub rmse: Option<f64>,
    pub estimates: Vec<CycleEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub batteries: Vec<BatteryEstimate>,
}

pub const NO_KNEE_STATUS: &str = "no knee onset; no estimation performed";

/// SOH estimates from the knee onset on, with the model matching the
/// battery's category.
pub fn estimate_battery(
    data: &BatteryData,
    settings: &Settings,
    fleet: &FleetModel,
    models: &BTreeMap<Category, SohModel>,
) -> Result<BatteryEstimate> {
    let detection = detect_battery(data, settings)?;
    let Some(knee) = detection.knee_onset else {
        return Ok(BatteryEstimate {
            battery_id: data.battery_id.clone(),
            knee_onset: None,
            category: None,
            model_battery: None,
            status: NO_KNEE_STATUS.to_string(),
            rmse: None,
            estimates: Vec::new(),
        });
    };
    let category = fleet.classify(knee as f64)?;
    let model = models.get(&category).ok_or(Error::NoModelForCategory(category))?;
    let sync = synchronize_all(&data.cycles)?;
    let mut estimates = Vec::new();
    for s in sync.iter().filter(|s| s.cycle_number >= knee) {
        estimates.push(CycleEstimate {
            cycle: s.cycle_number,
            estimate: soh::predict(model, s)?,
            truth: data.soh.as_ref().and_then(|q| q.get(s.cycle_number as usize)),
        });
    }
    let scored: Vec<(f64, f64)> = estimates
        .iter()
        .filter_map(|e| e.truth.map(|t| (e.estimate, t)))
        .collect();
    let rmse = if scored.is_empty() {
        None
    } else {
        let (est, truth): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
        Some(soh::rmse(&est, &truth)?)
    };
    Ok(BatteryEstimate {
        battery_id: data.battery_id.clone(),
        knee_onset: Some(knee),
        category: Some(category),
        model_battery: Some(model.meta.battery_id.clone()),
        status: format!("estimated {} cycles from knee onset {knee}", estimates.len()),
        rmse,
        estimates,
    })
}

/// Parses `args` and runs the command, writing summaries to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    execute(cli.command, out)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Detect(a) => cmd_detect(a, out),
        Command::Fleet(a) => cmd_fleet(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| {
        Error::Io(io::IoError::File {
            path: "<stdout>".into(),
            message: e.to_string(),
        })
    })
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(&a.common, |_| {})?;
    let (prefix, make): (&str, Box<dyn Fn(u64) -> SynthSpec + Sync>) = match a.category {
        SynthKind::Short => ("short", Box::new(SynthSpec::short_range)),
        SynthKind::Long => ("long", Box::new(SynthSpec::long_range)),
        SynthKind::Stationary => {
            let cycles = a.cycles;
            ("stationary", Box::new(move |s| SynthSpec::stationary(s, cycles)))
        }
    };
    let generated = (a.seed..a.seed + a.count)
        .into_par_iter()
        .map(|seed| {
            let spec = SynthSpec {
                nominal_capacity: settings.nominal_capacity,
                eol_threshold: settings.eol_threshold,
                ..make(seed)
            };
            let b = synth::generate_battery(&spec)?;
            let id = format!("{prefix}-{seed:03}");
            let truth = TruthEntry {
                battery_id: id.clone(),
                knee_cycle: (spec.knee_cycle <= spec.max_cycles).then_some(spec.knee_cycle),
                eol_cycle: b.eol_cycle,
            };
            Ok((
                BatteryData {
                    battery_id: id,
                    cycles: b.cycles,
                    soh: Some(b.soh),
                },
                truth,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (data, truth): (Vec<BatteryData>, Vec<TruthEntry>) = generated.into_iter().unzip();
    io::write_csv_file(&a.out, &data, settings.nominal_capacity)?;
    if let Some(path) = &a.truth {
        let mut m = RunManifest::new("synth", &settings);
        m.config = serde_json::json!({
            "settings": m.config,
            "category": prefix,
            "seed": a.seed,
            "count": a.count,
            "stationary_cycles": a.cycles,
        });
        io::write_json(path, &Artifact::new(KIND_SYNTH_TRUTH, m, truth.clone()))?;
    }
    for t in &truth {
        say(
            out,
            format!(
                "{}: knee {} eol {}",
                t.battery_id,
                t.knee_cycle.map_or("-".into(), |k| k.to_string()),
                t.eol_cycle.map_or("-".into(), |k| k.to_string())
            ),
        )?;
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs, out: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(&a.common, |s| a.detector.apply(s))?;
    let data = io::ingest(&a.input, settings.nominal_capacity, &settings.voltage_window)?;
    let batteries = data
        .par_iter()
        .map(|b| detect_battery(b, &settings))
        .collect::<Result<Vec<_>>>()?;
    let m = manifest("detect", &settings, &[&a.input])?;
    for b in &batteries {
        say(out, format!("{}: {}", b.battery_id, b.status))?;
    }
    io::write_json(&a.out, &Artifact::new(KIND_DETECT, m, DetectReport { batteries }))?;
    Ok(())
}

fn read_fleet_points(path: &Path) -> Result<Vec<FleetPoint>> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let report: Artifact<DetectReport> = io::read_artifact(path, KIND_DETECT)?;
        return report
            .body
            .batteries
            .iter()
            .filter_map(|b| match (b.knee_onset, b.eol) {
                (Some(k), Some(e)) => Some(FleetPoint::new(b.battery_id.clone(), k, e).map_err(Error::from)),
                _ => None,
            })
            .collect();
    }
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(io::IoError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|_| io::IoError::MissingHeader)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["battery_id", "knee_onset", "eol"] {
        return Err(Error::Usage(format!(
            "{}: expected header battery_id,knee_onset,eol",
            path.display()
        )));
    }
    let mut points = Vec::new();
    for (i, row) in rdr.deserialize::<FleetPoint>().enumerate() {
        let p = row.map_err(|e| io::IoError::MalformedRow {
            line: i as u64 + 2,
            reason: e.to_string(),
        })?;
        p.validate()?;
        points.push(p);
    }
    Ok(points)
}

fn cmd_fleet(a: FleetArgs, out: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(&a.common, |s| {
        if let Some(v) = a.components {
            s.gmm.components = v;
        }
        if let Some(v) = a.restarts {
            s.gmm.restarts = v;
        }
        if let Some(v) = a.gmm_seed {
            s.gmm.seed = v;
        }
        if let Some(m) = a.classify_mode {
            s.classify_mode = match m {
                ClassifyArg::KneeMarginal => ClassifyMode::KneeMarginal,
                ClassifyArg::EolBoundary => ClassifyMode::EolBoundary,
            };
        }
    })?;
    let mut points = read_fleet_points(&a.input)?;
    points.sort_by(|x, y| x.battery_id.cmp(&y.battery_id));
    let mut fleet = FleetModel::fit(points, &settings.gmm)?;
    fleet.classify_mode = settings.classify_mode;
    say(
        out,
        format!(
            "EOL = {:.4} x knee + {:.2}, R^2 = {:.4}",
            fleet.line.slope, fleet.line.intercept, fleet.line.r_squared
        ),
    )?;
    say(out, format!("EOL boundary between categories: {:.1}", fleet.categories.eol_boundary))?;
    for p in &fleet.points {
        say(
            out,
            format!("{}: {}", p.battery_id, fleet.classify(p.knee_onset as f64)?),
        )?;
    }
    let m = manifest("fleet", &settings, &[&a.input])?;
    io::write_json(&a.out, &Artifact::new(KIND_FLEET, m, fleet))?;
    Ok(())
}

fn pick_battery(data: Vec<BatteryData>, id: Option<&str>) -> Result<BatteryData> {
    match id {
        Some(id) => data
            .into_iter()
            .find(|b| b.battery_id == id)
            .ok_or_else(|| Error::Usage(format!("battery '{id}' not found in input"))),
        None if data.len() == 1 => Ok(data.into_iter().next().expect("one battery")),
        None => Err(Error::Usage(format!(
            "input holds {} batteries; choose one with --battery",
            data.len()
        ))),
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(&a.common, |s| {
        a.detector.apply(s);
        a.regressor.apply(s);
    })?;
    let data = io::ingest(&a.input, settings.nominal_capacity, &settings.voltage_window)?;
    let battery = pick_battery(data, a.battery.as_deref())?;
    let soh_series = battery
        .soh
        .clone()
        .ok_or_else(|| Error::MissingSoh(battery.battery_id.clone()))?;

    let knee = match a.knee {
        Some(k) => k,
        None => detect_battery(&battery, &settings)?.knee_onset.ok_or_else(|| {
            Error::Usage(format!(
                "no knee onset detected for {}; pass --knee",
                battery.battery_id
            ))
        })?,
    };
    let eol = match a.eol {
        Some(e) => e,
        None => synth::label_eol(&soh_series, settings.eol_threshold)? as u32,
    };
    let mut inputs = vec![a.input.as_path()];
    let category = match (a.category, &a.fleet) {
        (Some(c), _) => c,
        (None, Some(path)) => {
            inputs.push(path);
            let fleet: Artifact<FleetModel> = io::read_artifact(path, KIND_FLEET)?;
            fleet.body.classify(knee as f64)?
        }
        (None, None) => return Err(Error::Usage("pass --category or --fleet".into())),
    };
    let (mode, first) = if a.full_life {
        (TrainingMode::FullLife, 1)
    } else {
        (TrainingMode::Stage2, knee)
    };
    if eol <= knee {
        return Err(soh::SohError::RangeOutOfBounds { first: knee, last: eol }.into());
    }
    let sync = synchronize_all(&battery.cycles)?;
    let (cycles, targets) = soh::training_set(&sync, &soh_series, first, eol)?;
    let meta = TrainingMeta {
        battery_id: battery.battery_id.clone(),
        first_cycle: first,
        last_cycle: eol,
        mode,
        category: Some(category),
    };
    let model = soh::train(&cycles, &targets, &settings.regressor, meta)?;
    say(
        out,
        format!(
            "{}: trained {:?} {} model on cycles {first}..={eol} ({} epochs), training RMSE {:.5}",
            battery.battery_id, mode, category, model.report.epochs_run, model.report.training_rmse
        ),
    )?;
    let mut m = manifest("train", &settings, &inputs)?;
    m.config = serde_json::json!({
        "settings": m.config,
        "battery": battery.battery_id,
        "knee_onset": knee,
        "eol": eol,
        "category": category,
        "mode": mode,
    });
    io::write_json(&a.out, &Artifact::new(KIND_MODEL, m, model))?;
    Ok(())
}

fn cmd_estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(&a.common, |s| a.detector.apply(s))?;
    let data = io::ingest(&a.input, settings.nominal_capacity, &settings.voltage_window)?;
    let fleet: Artifact<FleetModel> = io::read_artifact(&a.fleet, KIND_FLEET)?;
    let mut models: BTreeMap<Category, SohModel> = BTreeMap::new();
    for path in &a.models {
        let art: Artifact<SohModel> = io::read_artifact(path, KIND_MODEL)?;
        let category = art
            .body
            .meta
            .category
            .ok_or_else(|| Error::Usage(format!("{}: model has no category", path.display())))?;
        models.entry(category).or_insert(art.body);
    }
    let batteries = data
        .par_iter()
        .map(|b| estimate_battery(b, &settings, &fleet.body, &models))
        .collect::<Result<Vec<_>>>()?;
    for b in &batteries {
        let rmse = b.rmse.map_or(String::new(), |r| format!(", RMSE {r:.5}"));
        let cat = b.category.map_or(String::new(), |c| format!(" [{c}]"));
        say(out, format!("{}{cat}: {}{rmse}", b.battery_id, b.status))?;
    }
    let mut inputs: Vec<&Path> = vec![&a.input, &a.fleet];
    inputs.extend(a.models.iter().map(PathBuf::as_path));
    let m = manifest("estimate", &settings, &inputs)?;
    let report = EstimateReport { batteries };
    if let Some(path) = &a.csv {
        write_estimate_csv(path, &report)?;
    }
    io::write_json(&a.out, &Artifact::new(KIND_ESTIMATE, m, report))?;
    Ok(())
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(io::IoError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_estimate_csv(path: &Path, report: &EstimateReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["battery_id", "cycle", "truth", "estimate"])
        .map_err(|e| csv_error(path, e))?;
    for b in &report.batteries {
        for e in &b.estimates {
            w.write_record([
                b.battery_id.clone(),
                e.cycle.to_string(),
                e.truth.map_or(String::new(), |t| t.to_string()),
                e.estimate.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_error(path, e))
}

fn write_trace_csv(path: &Path, report: &DetectReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["battery_id", "cycle", "verdict", "evaluated", "profile_value", "profile_index"])
        .map_err(|e| csv_error(path, e))?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for b in &report.batteries {
        for t in &b.trace {
            let verdict = match t.verdict {
                Verdict::Warming => "warming".to_string(),
                Verdict::NoChange => "no_change".to_string(),
                Verdict::Candidate(c) => format!("candidate:{c}"),
                Verdict::KneeOnset(c) => format!("knee_onset:{c}"),
            };
            w.write_record([
                b.battery_id.clone(),
                t.cycle.to_string(),
                verdict,
                opt(t.evaluated.map(|v| v.to_string())),
                opt(t.profile_value.map(|v| v.to_string())),
                opt(t.profile_index.map(|v| v.to_string())),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_error(path, e))
}

fn write_fleet_csv(path: &Path, fleet: &FleetModel) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["battery_id", "knee_onset", "eol", "fitted_eol", "category"])
        .map_err(|e| csv_error(path, e))?;
    for p in &fleet.points {
        w.write_record([
            p.battery_id.clone(),
            p.knee_onset.to_string(),
            p.eol.to_string(),
            fleet.line.predict(p.knee_onset as f64).to_string(),
            fleet.classify(p.knee_onset as f64)?.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))
}

fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| csv_error(&a.input, e))?;
    let head: Value = serde_json::from_str(&text).map_err(|e| {
        Error::Io(io::IoError::Json {
            path: a.input.display().to_string(),
            message: e.to_string(),
        })
    })?;
    let kind = head.get("kind").and_then(Value::as_str).unwrap_or("").to_string();
    match kind.as_str() {
        KIND_DETECT => {
            let r: Artifact<DetectReport> = io::read_artifact(&a.input, KIND_DETECT)?;
            for b in &r.body.batteries {
                let ucl = b.ucl.map_or("-".into(), |u| format!("{u:.4}"));
                say(out, format!("{}: {} (UCL {ucl}, {} cycles)", b.battery_id, b.status, b.cycles))?;
            }
            if let Some(path) = &a.csv {
                write_trace_csv(path, &r.body)?;
            }
        }
        KIND_ESTIMATE => {
            let r: Artifact<EstimateReport> = io::read_artifact(&a.input, KIND_ESTIMATE)?;
            for b in &r.body.batteries {
                let rmse = b.rmse.map_or("-".into(), |v| format!("{v:.5}"));
                say(out, format!("{}: {} (RMSE {rmse})", b.battery_id, b.status))?;
            }
            if let Some(path) = &a.csv {
                write_estimate_csv(path, &r.body)?;
            }
        }
        KIND_FLEET => {
            let r: Artifact<FleetModel> = io::read_artifact(&a.input, KIND_FLEET)?;
            say(
                out,
                format!(
                    "{} batteries, R^2 {:.4}, EOL boundary {:.1}",
                    r.body.points.len(),
                    r.body.line.r_squared,
                    r.body.categories.eol_boundary
                ),
            )?;
            if let Some(path) = &a.csv {
                write_fleet_csv(path, &r.body)?;
            }
        }
        KIND_MODEL => {
            let r: Artifact<SohModel> = io::read_artifact(&a.input, KIND_MODEL)?;
            let meta = &r.body.meta;
            say(
                out,
                format!(
                    "model from {} cycles {}..={} ({:?}, {}), training RMSE {:.5}",
                    meta.battery_id,
                    meta.first_cycle,
                    meta.last_cycle,
                    meta.mode,
                    meta.category.map_or("no category".into(), |c| c.to_string()),
                    r.body.report.training_rmse
                ),
            )?;
        }
        other => {
            return Err(Error::Usage(format!(
                "{}: cannot report on artifact kind '{other}'",
                a.input.display()
            )))
        }
    }
    Ok(())
}
