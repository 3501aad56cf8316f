//! Command-line pipeline: simulate, match, calibrate, evaluate.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cam::{cam_calibrate, select_scan_pairs, CamConfig};
use crate::calibration::CalibrationResult;
use crate::cirls::{attach_odometry, cirls_calibrate, cirls_cf_calibrate, CirlsConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::io::{self, DisplacementRecord, OdometryRecord, ParamFile, PoseRecord, ScanRecord};
use crate::kinematics::{sensor_displacement, DiffDriveParams, DriveParams, MecanumParams, SensorModel};
use crate::metrics::{evaluate, predict_trajectory, MotionModel};
use crate::modelfree::{fit_linear_model, gp_fit, optimize_hyperparameters, GpModel, KernelSpec, LinearModel, MeanSpec, TrainingSample};
use crate::odometry::OdometryLog;
use crate::scanmatch::{estimate_displacement_detailed, IcpConfig};
use crate::simulate::{make_world, rng_from_seed, simulate_all, synth_model_free, synth_scans, Distortion, SimConfig};

pub const DEFAULT_TICKS_PER_REV: f64 = 2578.33;

#[derive(Debug, Parser)]
#[command(name = "wheelcal", version, about = "Odometry and sensor-mounting calibration for wheeled robots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Estimate sensor displacements between selected scan pairs.
    Match(MatchArgs),
    /// Estimate the motion model.
    Calibrate(CalibrateArgs),
    /// Score a model against a reference trajectory.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Nominal {
    Kobuki,
    Mecanum,
}

impl Nominal {
    pub fn model(self) -> SensorModel {
        match self {
            Nominal::Kobuki => SensorModel::new(
                DriveParams::DiffDrive(DiffDriveParams { r_l: 0.035, r_r: 0.035, b: 0.230 }),
                Pose2D::new(0.0, 0.0, std::f64::consts::PI),
            ),
            Nominal::Mecanum => SensorModel::new(
                DriveParams::Mecanum(MecanumParams { r: 0.03, l_x: 0.08, l_y: 0.16 }),
                Pose2D::IDENTITY,
            ),
        }
    }
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Initial parameters from a parameter file.
    #[arg(long, conflicts_with = "nominal")]
    pub init: Option<PathBuf>,
    /// Built-in manufacturer-style parameters.
    #[arg(long, value_enum)]
    pub nominal: Option<Nominal>,
    /// Encoder resolution; defaults to the value in the parameter file or 2578.33.
    #[arg(long)]
    pub ticks_per_rev: Option<f64>,
}

impl InitArgs {
    fn load(&self) -> Result<(SensorModel, f64, Option<PathBuf>)> {
        let (model, tpr) = match (&self.init, self.nominal) {
            (Some(p), _) => {
                let mut v: Value = io::read_json(p)?;
                if let Value::Object(m) = &mut v {
                    m.remove("manifest_hash");
                }
                let f: ParamFile = serde_json::from_value(v).map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?;
                (f.to_model()?, f.ticks_per_rev)
            }
            (None, Some(n)) => (n.model(), None),
            (None, None) => return Err(Error::Schema("one of --init or --nominal is required".into())),
        };
        let tpr = self.ticks_per_rev.or(tpr).unwrap_or(DEFAULT_TICKS_PER_REV);
        if !(tpr > 0.0) {
            return Err(Error::Schema(format!("ticks_per_rev must be positive, got {tpr}")));
        }
        Ok((model, tpr, self.init.clone()))
    }
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub scans: PathBuf,
    #[arg(long)]
    pub odometry: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    /// Scan-matching and pair-selection settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep failed matches, flagged, instead of dropping them.
    #[arg(long)]
    pub keep_failures: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cam,
    Cirls,
    CirlsCf,
    Gp,
    Linear,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub odometry: PathBuf,
    /// Displacement observations (all methods except cam).
    #[arg(long)]
    pub displacements: Option<PathBuf>,
    /// Scans (cam only).
    #[arg(long)]
    pub scans: Option<PathBuf>,
    #[command(flatten)]
    pub init: InitArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub huber_c: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Result file.
    #[arg(long)]
    pub out: PathBuf,
    /// Where learned models are stored (gp, linear); defaults next to the result.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A calibration result or a learned model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub odometry: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub ticks_per_rev: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step error series; defaults next to the metrics file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

/// Provenance of one command: what was run on which inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub version: String,
    /// Hash of the fields above; copied into every JSON output.
    pub manifest_hash: String,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    fn new(command: &str, config: Value, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(FileDigest { name: file_name(p), sha256: io::sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let version = env!("CARGO_PKG_VERSION").to_string();
        let core = json!({ "command": command, "config": config, "seed": seed, "inputs": inputs, "version": version });
        let manifest_hash = io::sha256_hex(serde_json::to_string(&core).map_err(|e| Error::Schema(e.to_string()))?.as_bytes());
        Ok(Self { command: command.into(), config, seed, inputs, version, manifest_hash, outputs: Vec::new() })
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest { name: file_name(path), sha256: io::sha256_file(path)? });
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        io::write_json(&path, self)?;
        Ok(path)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn out_dir(p: &Path) -> PathBuf {
    p.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn with_hash(mut v: Value, hash: &str) -> Value {
    if let Value::Object(m) = &mut v {
        m.insert("manifest_hash".into(), Value::String(hash.into()));
    }
    v
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Schema(e.to_string()))
}

fn parse_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => io::read_json(p),
        None => Ok(T::default()),
    }
}

/// Simulator settings plus an optional departure from the nominal kinematics.
pub fn parse_sim_config(text: &str, origin: &str) -> Result<(SimConfig, Distortion)> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Schema(format!("{origin}: {e}")))?;
    let obj = v.as_object_mut().ok_or_else(|| Error::Schema(format!("{origin}: expected a JSON object")))?;
    for key in ["drive", "extrinsic"] {
        if !obj.contains_key(key) {
            return Err(Error::Schema(format!("{origin}: missing required field `{key}`")));
        }
    }
    let distortion = match obj.remove("distortion") {
        Some(d) => serde_json::from_value(d).map_err(|e| Error::Schema(format!("{origin}: distortion: {e}")))?,
        None => Distortion::None,
    };
    let cfg: SimConfig = serde_json::from_value(v).map_err(|e| Error::Schema(format!("{origin}: {e}")))?;
    cfg.validate()?;
    Ok((cfg, distortion))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let (mut cfg, distortion) = match &args.config {
        Some(p) => parse_sim_config(&std::fs::read_to_string(p)?, &p.display().to_string())?,
        None => (SimConfig::default(), Distortion::None),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&args.out)?;
    let (log, scans) = match distortion {
        Distortion::None => {
            let (log, _, scans) = simulate_all(&cfg)?;
            (log, scans)
        }
        ref d => {
            let data = synth_model_free(&cfg, d)?;
            let mut rng = rng_from_seed(cfg.seed ^ 0x5eed_5ca7);
            let world = make_world(&cfg.world, &mut rng);
            let scans = synth_scans(&cfg, &world, &data.log, &mut rng)?;
            (data.log, scans)
        }
    };
    let mut config = to_value(&cfg)?;
    if distortion != Distortion::None {
        config["distortion"] = to_value(&distortion)?;
    }
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    let mut manifest = RunManifest::new("simulate", config, Some(cfg.seed), &inputs)?;
    let dir = &args.out;
    let files = [
        ("odometry.jsonl", io::to_jsonl(&io::odometry_records(&log.odometry))?),
        ("scans.jsonl", io::to_jsonl(&io::scan_records(&scans))?),
        ("displacements.jsonl", io::to_jsonl(&log.observations.iter().map(DisplacementRecord::from).collect::<Vec<_>>())?),
        (
            "truth.json",
            io::to_json_pretty(&with_hash(
                to_value(&ParamFile::from_model(&SensorModel::new(cfg.drive, cfg.extrinsic), Some(cfg.ticks_per_rev)))?,
                &manifest.manifest_hash,
            ))?,
        ),
        ("trajectory_ref.jsonl", io::to_jsonl(&io::trajectory_records(&log.sensor_trajectory))?),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        io::write_atomic(&p, text.as_bytes())?;
        manifest.record(&p)?;
        written.push(p);
    }
    written.push(manifest.write(dir)?);
    Ok(written)
}

fn load_odometry(path: &Path, tpr: f64) -> Result<OdometryLog> {
    io::odometry_from_records(io::read_jsonl::<OdometryRecord>(path)?, tpr)
}

/// Scan-matching settings for the `match` command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub icp: IcpConfig,
    pub selection: crate::cam::PairSelection,
}

pub fn cmd_match(args: &MatchArgs) -> Result<Vec<PathBuf>> {
    let (model, tpr, init_path) = args.init.load()?;
    let cfg: MatchConfig = parse_config(args.config.as_deref())?;
    let odometry = load_odometry(&args.odometry, tpr)?;
    let scans = io::scans_from_records(io::read_jsonl::<ScanRecord>(&args.scans)?)?;
    let times: Vec<f64> = scans.iter().map(|s| s.timestamp).collect();
    let pairs = select_scan_pairs(&times, &odometry, &model.drive, &cfg.selection)?;
    use rayon::prelude::*;
    let outcomes = pairs
        .par_iter()
        .map(|p| {
            let guess = sensor_displacement(&model.extrinsic, &p.predicted);
            estimate_displacement_detailed(&scans[p.j], &scans[p.k], &guess, &cfg.icp)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut failures = 0;
    for o in &outcomes {
        if o.failed {
            failures += 1;
            log::warn!("match {} -> {} failed: mean kept squared distance {:.3e}", o.obs.t_j, o.obs.t_k, o.mean_kept_sq);
            if !args.keep_failures {
                continue;
            }
        }
        records.push(DisplacementRecord { failed: o.failed, ..DisplacementRecord::from(&o.obs) });
    }
    if records.iter().all(|r| r.failed) {
        return Err(Error::InsufficientExcitation(format!("all {} scan matches failed", outcomes.len())));
    }
    log::info!("{} pairs matched, {} failed", outcomes.len() - failures, failures);
    let mut inputs: Vec<&Path> = vec![&args.scans, &args.odometry];
    if let Some(p) = &init_path {
        inputs.push(p);
    }
    if let Some(p) = &args.config {
        inputs.push(p);
    }
    let config = json!({ "match": to_value(&cfg)?, "keep_failures": args.keep_failures, "ticks_per_rev": tpr, "init": to_value(&ParamFile::from_model(&model, None))? });
    let mut manifest = RunManifest::new("match", config, None, &inputs)?;
    io::write_jsonl(&args.out, &records)?;
    manifest.record(&args.out)?;
    let m = manifest.write(&out_dir(&args.out))?;
    Ok(vec![args.out.clone(), m])
}

/// Learned-model settings for the `gp` method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { mean: MeanSpec::Linear, kernel: KernelSpec::Linear }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub huber_c: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { huber_c: 1.345 }
    }
}

/// Result file of a parametric calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub method: Method,
    #[serde(flatten)]
    pub params: ParamFile,
    pub intervals: Option<std::collections::BTreeMap<String, [f64; 2]>>,
    pub std_devs: Option<std::collections::BTreeMap<String, f64>>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub mse: Option<f64>,
    pub weights_histogram: [usize; 10],
    pub converged: bool,
    pub warnings: Vec<String>,
    pub log: Vec<crate::calibration::IterationRecord>,
    pub manifest_hash: String,
}

/// Result file of a learned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedResultFile {
    pub method: Method,
    pub model_file: String,
    pub model_sha256: String,
    pub n_train: usize,
    pub ticks_per_rev: f64,
    pub manifest_hash: String,
}

fn training_samples(odometry: &OdometryLog, obs: &[crate::scanmatch::DisplacementObs]) -> Result<Vec<TrainingSample>> {
    obs.iter()
        .map(|o| Ok(TrainingSample { delta: odometry.delta_ticks(o.t_j, o.t_k)?, s_hat: o.s_hat.to_array(), sigma: o.sigma }))
        .collect()
}

fn result_file(method: Method, r: &CalibrationResult, sigma: &[[f64; 3]], tpr: f64, hash: &str) -> ResultFile {
    let named = |v: &[f64]| r.param_names.iter().cloned().zip(v.iter().copied()).collect();
    ResultFile {
        method,
        params: ParamFile::from_model(&r.model, Some(tpr)),
        intervals: r.intervals.as_ref().map(|iv| r.param_names.iter().cloned().zip(iv.iter().copied()).collect()),
        std_devs: r.std_devs().map(|s| named(&s)),
        covariance: r.covariance.clone(),
        mse: r.mse,
        weights_histogram: r.weight_histogram(sigma),
        converged: r.converged,
        warnings: r.warnings.clone(),
        log: r.log.clone(),
        manifest_hash: hash.into(),
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<Vec<PathBuf>> {
    let (model, tpr, init_path) = args.init.load()?;
    let odometry = load_odometry(&args.odometry, tpr)?;
    let mut inputs: Vec<&Path> = vec![&args.odometry];
    for p in [&args.displacements, &args.scans, &init_path, &args.config].into_iter().flatten() {
        inputs.push(p);
    }
    let displacements = || -> Result<Vec<crate::scanmatch::DisplacementObs>> {
        let p = args.displacements.as_ref().ok_or_else(|| Error::Schema("--displacements is required for this method".into()))?;
        Ok(io::read_jsonl::<DisplacementRecord>(p)?.iter().filter(|r| !r.failed).map(DisplacementRecord::to_obs).collect())
    };
    let base = json!({ "method": args.method, "ticks_per_rev": tpr, "init": to_value(&ParamFile::from_model(&model, None))? });
    let dir = out_dir(&args.out);
    match args.method {
        Method::Cam => {
            let mut cfg: CamConfig = parse_config(args.config.as_deref())?;
            if let Some(c) = args.huber_c {
                cfg.huber_c = c;
            }
            if let Some(n) = args.max_iters {
                cfg.max_outer = n;
            }
            let scans_path = args.scans.as_ref().ok_or_else(|| Error::Schema("--scans is required for cam".into()))?;
            let scans = io::scans_from_records(io::read_jsonl::<ScanRecord>(scans_path)?)?;
            let r = cam_calibrate(&scans, &odometry, &model, &cfg)?;
            let manifest = RunManifest::new("calibrate", with_cfg(base, &cfg)?, None, &inputs)?;
            finish_parametric(args, r, &[], tpr, manifest, &dir)
        }
        Method::Cirls | Method::CirlsCf => {
            let mut cfg: CirlsConfig = parse_config(args.config.as_deref())?;
            if let Some(c) = args.huber_c {
                cfg.huber_c = c;
            }
            if let Some(n) = args.max_iters {
                cfg.max_outer = n;
            }
            let obs = attach_odometry(&displacements()?, &odometry)?;
            let r = if args.method == Method::Cirls {
                cirls_calibrate(&obs, &model, &cfg)?
            } else {
                cirls_cf_calibrate(&obs, &model, &cfg)?
            };
            let sigma: Vec<[f64; 3]> = obs.iter().map(|o| o.obs.sigma).collect();
            let manifest = RunManifest::new("calibrate", with_cfg(base, &cfg)?, None, &inputs)?;
            finish_parametric(args, r, &sigma, tpr, manifest, &dir)
        }
        Method::Gp | Method::Linear => {
            let data = training_samples(&odometry, &displacements()?)?;
            let model_path = args.model_out.clone().unwrap_or_else(|| dir.join("model.json"));
            let (config, n) = if args.method == Method::Gp {
                let cfg: GpConfig = parse_config(args.config.as_deref())?;
                let hypers = optimize_hyperparameters(&data, cfg.mean, cfg.kernel)?;
                let gp = gp_fit(&data, cfg.mean, cfg.kernel, &hypers)?;
                gp.save(&model_path)?;
                (with_cfg(base, &cfg)?, data.len())
            } else {
                let mut cfg: LinearConfig = parse_config(args.config.as_deref())?;
                if let Some(c) = args.huber_c {
                    cfg.huber_c = c;
                }
                fit_linear_model(&data, cfg.huber_c)?.save(&model_path)?;
                (with_cfg(base, &cfg)?, data.len())
            };
            let mut manifest = RunManifest::new("calibrate", config, None, &inputs)?;
            manifest.record(&model_path)?;
            let out = LearnedResultFile {
                method: args.method,
                model_file: file_name(&model_path),
                model_sha256: io::sha256_file(&model_path)?,
                n_train: n,
                ticks_per_rev: tpr,
                manifest_hash: manifest.manifest_hash.clone(),
            };
            io::write_json(&args.out, &out)?;
            manifest.record(&args.out)?;
            let m = manifest.write(&dir)?;
            Ok(vec![model_path, args.out.clone(), m])
        }
    }
}

fn with_cfg<T: Serialize>(mut base: Value, cfg: &T) -> Result<Value> {
    base["config"] = to_value(cfg)?;
    Ok(base)
}

fn finish_parametric(
    args: &CalibrateArgs,
    r: CalibrationResult,
    sigma: &[[f64; 3]],
    tpr: f64,
    mut manifest: RunManifest,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    for w in &r.warnings {
        log::warn!("{w}");
    }
    let out = result_file(args.method, &r, sigma, tpr, &manifest.manifest_hash);
    io::write_json(&args.out, &out)?;
    manifest.record(&args.out)?;
    let m = manifest.write(dir)?;
    Ok(vec![args.out.clone(), m])
}

/// Load any model the pipeline writes: a parametric result, a GP or a linear model.
pub fn load_motion_model(path: &Path) -> Result<(MotionModel, Option<f64>)> {
    let v: Value = io::read_json(path)?;
    if v.get("params").is_some() {
        let f: ResultFileParams = serde_json::from_value(v).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let pf = ParamFile { drive: f.drive, params: f.params, ticks_per_rev: f.ticks_per_rev };
        return Ok((MotionModel::Parametric(pf.to_model()?), pf.ticks_per_rev));
    }
    if v.get("model_file").is_some() {
        let f: LearnedResultFile = serde_json::from_value(v).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let (m, _) = load_motion_model(&out_dir(path).join(&f.model_file))?;
        return Ok((m, Some(f.ticks_per_rev)));
    }
    if v.get("kernel_spec").is_some() {
        return Ok((MotionModel::Gp(Box::new(GpModel::load(path)?)), None));
    }
    if v.get("w").is_some() {
        return Ok((MotionModel::Linear(LinearModel::load(path)?), None));
    }
    Err(Error::Schema(format!("{}: not a recognised model or result file", path.display())))
}

#[derive(Deserialize)]
struct ResultFileParams {
    drive: String,
    params: std::collections::BTreeMap<String, f64>,
    #[serde(default)]
    ticks_per_rev: Option<f64>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<PathBuf>> {
    let (model, file_tpr) = load_motion_model(&args.model)?;
    let tpr = args.ticks_per_rev.or(file_tpr).unwrap_or(DEFAULT_TICKS_PER_REV);
    let odometry = load_odometry(&args.odometry, tpr)?;
    let reference = io::trajectory_from_records(io::read_jsonl::<PoseRecord>(&args.reference)?)?;
    let first = reference.poses().first().ok_or_else(|| Error::Association("empty reference trajectory".into()))?;
    let est = predict_trajectory(&model, &odometry, &reference.times(), first.pose)?;
    let report = evaluate(&est, &reference)?;
    let inputs: Vec<&Path> = vec![&args.model, &args.odometry, &args.reference];
    let mut manifest = RunManifest::new("evaluate", json!({ "ticks_per_rev": tpr }), None, &inputs)?;
    let csv_path = args.csv.clone().unwrap_or_else(|| out_dir(&args.out).join("per_step.csv"));
    let mut csv = String::from("step,t,ate_m,rpe_m\n");
    let times = reference.times();
    for (i, a) in report.ate_series.iter().enumerate() {
        let rpe = report.rpe_series.get(i).map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{i},{},{a},{rpe}\n", times[i]));
    }
    io::write_json(&args.out, &with_hash(to_value(&report)?, &manifest.manifest_hash))?;
    manifest.record(&args.out)?;
    io::write_atomic(&csv_path, csv.as_bytes())?;
    manifest.record(&csv_path)?;
    let m = manifest.write(&out_dir(&args.out))?;
    Ok(vec![args.out.clone(), csv_path, m])
}

/// Cap the worker pool from `WHEELCAL_THREADS`.
pub fn configure_threads() {
    if let Some(n) = std::env::var("WHEELCAL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size worker pool: {e}");
        }
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let start = std::time::Instant::now();
    let out = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Match(a) => cmd_match(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }?;
    eprintln!("finished in {:.2} s", start.elapsed().as_secs_f64());
    Ok(out)
}
