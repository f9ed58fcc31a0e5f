//! Pipeline command line: scene generation, training, Lipschitz analysis,
//! landscape scans, mAP evaluation, and report export.
//!
//! Every verb writes a `manifest.json` beside its outputs (config hash, seed,
//! source revision), so a run directory describes itself. All randomness
//! derives from `--seed` through tagged streams; repeating a command with the
//! same inputs reproduces its outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use lrod::analysis::{
    audit_checkpoints, backbone_features_fn, beta_sensitivity, detector_input_fn,
    restorer_input_fn, AuditSample,
};
use lrod::degrade::{
    apply_haze_tensor, apply_tensor, val_degradation, Degradation, DegradationMode, HazeParams,
};
use lrod::landscape::{
    project_trajectory, sample_directions, scan, write_grid_csv, write_grid_meta_json,
    write_trajectory_csv,
};
use lrod::lipschitz::{dataset_sweep, feature_shift_fraction, write_audit_csv, write_report_csv,
    write_report_json, PowerIterConfig};
use lrod::loss::{charbonnier_loss, detection_loss, param_grad_norm_penalty, total_loss};
use lrod::model::{
    detector_forward, load_checkpoint, restorer_forward, save_checkpoint, shared_forward,
    CheckpointHeader, ParamLayout,
};
use lrod::report::{export_report, sha256_hex, write_run_manifest, RunManifest};
use lrod::rng::stream;
use lrod::scene::{build_split, load_split, SceneConfig, SceneRecord};
use lrod::tape::Tape;
use lrod::tensor::Tensor;
use lrod::train::{eval_map50, train, write_loss_csv, TrainConfig, TrainMode};

/// Seed offset separating validation scene seeds from training ones.
const VAL_SEED_OFFSET: u64 = 1 << 32;
/// Probe-set size for analysis-time Lipschitz suprema.
const PROBE_LIMIT: usize = 64;
/// Haze-density perturbation for the feature-shift report.
const DELTA_BETA: f64 = 0.1;
/// Relative activation-change threshold for the feature-shift report.
const SHIFT_THRESHOLD: f64 = 0.1;

#[derive(Parser)]
#[command(name = "lrod", version, about = "Lipschitz-regularized toy detection pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train and validation scene splits with disjoint seed ranges.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training split size; the validation split gets a quarter of it.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional scene-config JSON overriding the 64x64 default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model from a JSON config against a generated data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Data directory from gen-data, or a train manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the mode in the config file.
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Override the degradation in the config file.
        #[arg(long)]
        degradation: Option<DegradationMode>,
    },
    /// Lipschitz sweeps, feature-shift fractions, haze-density sensitivity,
    /// and the training-dynamics audit of a finished run.
    Analyze {
        /// Train run directory, or a single checkpoint file (no audit then).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of the scenes used as probes (normally the val split).
        #[arg(long)]
        probe_set: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Degradation applied to the probes; defaults to the train config's.
        #[arg(long)]
        degradation: Option<DegradationMode>,
    },
    /// Filter-normalized loss-landscape scans around a trained checkpoint.
    Landscape {
        /// Train run directory (checkpoints feed the trajectory projection).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of the scenes forming the fixed evaluation batch.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid resolution per axis; odd so the center is on-grid.
        #[arg(long, default_value_t = 25)]
        n: usize,
        /// Fixed evaluation batch size.
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Which loss surface to scan: det, res, total, or all.
        #[arg(long, default_value = "all")]
        loss: String,
        /// Sanity check: fail if the checkpoint was trained in another mode.
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// mAP@50 on a degraded validation split.
    Eval {
        /// Train run directory or a single checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        degradation: Option<DegradationMode>,
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
    },
    /// Bundle a pipeline run directory into one consolidated report.
    ExportReport {
        /// Directory holding train/, analyze/, landscape/ and eval/ outputs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = check_thread_env() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// LRL_THREADS caps worker parallelism. Execution is currently sequential, so
/// any positive value is accepted and recorded; malformed values are refused
/// up front as a usage error.
fn check_thread_env() -> Result<(), String> {
    match std::env::var("LRL_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("LRL_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData { seed, n, out, config } => gen_data(seed, n, &out, config.as_deref()),
        Cmd::Train { config, data, out, seed, mode, degradation } => {
            cmd_train(&config, &data, &out, seed, mode, degradation)
        }
        Cmd::Analyze { checkpoint, probe_set, out, seed, degradation } => {
            cmd_analyze(&checkpoint, &probe_set, &out, seed, degradation)
        }
        Cmd::Landscape { checkpoint, data, out, seed, n, batch, loss, mode } => {
            cmd_landscape(&checkpoint, &data, &out, seed, n, batch, &loss, mode)
        }
        Cmd::Eval { checkpoint, data, out, seed, degradation, score_threshold, nms_iou } => {
            cmd_eval(&checkpoint, &data, &out, seed, degradation, score_threshold, nms_iou)
        }
        Cmd::ExportReport { out } => {
            let path = export_report(&out).context("export-report")?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Serialize)]
struct GenDataSummary<'a> {
    scene: &'a SceneConfig,
    #[serde(rename = "n-train")]
    n_train: usize,
    #[serde(rename = "n-val")]
    n_val: usize,
    #[serde(rename = "train-manifest-sha256")]
    train_sha256: String,
    #[serde(rename = "val-manifest-sha256")]
    val_sha256: String,
}

fn gen_data(seed: u64, n: usize, out: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let scene_cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parse {}", p.display()))?
        }
        None => SceneConfig::default(),
    };
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let n_val = (n / 4).max(1);
    let train = build_split(seed, n, &scene_cfg, out, "train").context("train split")?;
    let val = build_split(seed + VAL_SEED_OFFSET, n_val, &scene_cfg, out, "val")
        .context("val split")?;
    let summary = GenDataSummary {
        scene: &scene_cfg,
        n_train: n,
        n_val,
        train_sha256: train.manifest_sha256,
        val_sha256: val.manifest_sha256,
    };
    let summary_text = canonical_json(&summary);
    fs::write(out.join("splits.json"), &summary_text).context("write splits.json")?;
    write_run_manifest(
        out,
        &RunManifest {
            verb: "gen-data".into(),
            seed,
            config_sha256: sha256_hex(canonical_json(&scene_cfg).as_bytes()),
            git_describe: lrod::report::git_describe(),
            outputs: vec!["train.jsonl".into(), "val.jsonl".into(), "splits.json".into()],
        },
    )?;
    println!("train {} val {}", summary.n_train, summary.n_val);
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn resolve_manifest(data: &Path, name: &str) -> PathBuf {
    if data.is_file() {
        data.to_path_buf()
    } else {
        data.join(name)
    }
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    mode: Option<TrainMode>,
    degradation: Option<DegradationMode>,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("read {}", config.display()))?;
    let mut cfg: TrainConfig =
        serde_json::from_str(&text).with_context(|| format!("parse {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(d) = degradation {
        cfg.degradation = d;
    }
    cfg.validate().context("train config")?;
    let manifest = resolve_manifest(data, "train.jsonl");
    let scenes = load_split(&manifest).context("load training scenes")?;

    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let resolved = canonical_json(&cfg);
    fs::write(out.join("config.json"), &resolved).context("write config.json")?;

    let trace = train(&cfg, &scenes).context("training")?;

    let ckpt_mode = match cfg.mode {
        TrainMode::Cascade => "cascade-detector",
        m => m.tag(),
    };
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).context("create checkpoints dir")?;
    let mut outputs = vec!["config.json".to_string(), "loss.csv".to_string()];
    write_loss_csv(&trace.steps, &cfg.effective_weights(), &out.join("loss.csv"))?;
    if !trace.stage1_steps.is_empty() {
        write_loss_csv(&trace.stage1_steps, &cfg.effective_weights(), &out.join("stage1-loss.csv"))?;
        outputs.push("stage1-loss.csv".into());
    }
    for (step, params) in &trace.checkpoints {
        let p = ckpt_dir.join(format!("step-{step:08}.ckpt"));
        save_checkpoint(&p, ckpt_mode, &trace.layout, params)?;
    }
    save_checkpoint(&ckpt_dir.join("final.ckpt"), ckpt_mode, &trace.layout, &trace.params)?;
    outputs.push("checkpoints/final.ckpt".into());
    if let Some((r_layout, r_params)) = &trace.restorer {
        save_checkpoint(&ckpt_dir.join("restorer.ckpt"), "cascade-restorer", r_layout, r_params)?;
        outputs.push("checkpoints/restorer.ckpt".into());
    }
    write_run_manifest(
        out,
        &RunManifest {
            verb: "train".into(),
            seed: cfg.seed,
            config_sha256: sha256_hex(resolved.as_bytes()),
            git_describe: lrod::report::git_describe(),
            outputs,
        },
    )?;
    if let Some((step, reason)) = &trace.diverged {
        bail!("training diverged at step {step}: {reason} (partial trace written)");
    }
    println!("{} steps, final checkpoint {}", trace.steps.len(), ckpt_dir.join("final.ckpt").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

struct LoadedRun {
    header: CheckpointHeader,
    params: Tensor,
    /// Resolved train config when the checkpoint came from a run directory.
    train_cfg: Option<TrainConfig>,
    /// Snapshots at the audit interval, (step, params).
    snapshots: Vec<(usize, Tensor)>,
    /// Stage-1 restorer of a cascade run.
    restorer: Option<(ParamLayout, Tensor)>,
}

fn load_run(checkpoint: &Path) -> anyhow::Result<LoadedRun> {
    if checkpoint.is_file() {
        let (header, params) = load_checkpoint(checkpoint)?;
        return Ok(LoadedRun { header, params, train_cfg: None, snapshots: Vec::new(), restorer: None });
    }
    let ckpt_dir = checkpoint.join("checkpoints");
    let (header, params) = load_checkpoint(&ckpt_dir.join("final.ckpt"))
        .with_context(|| format!("no checkpoints under {}", checkpoint.display()))?;
    let cfg_text = fs::read_to_string(checkpoint.join("config.json")).ok();
    let train_cfg = match cfg_text {
        Some(t) => Some(serde_json::from_str(&t).context("parse run config.json")?),
        None => None,
    };
    let mut snapshots = Vec::new();
    for entry in fs::read_dir(&ckpt_dir).with_context(|| format!("read {}", ckpt_dir.display()))? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".ckpt")) {
            let step: usize = step.parse().with_context(|| format!("checkpoint name {name}"))?;
            let (_, t) = load_checkpoint(&p)?;
            snapshots.push((step, t));
        }
    }
    snapshots.sort_by_key(|(s, _)| *s);
    let restorer_path = ckpt_dir.join("restorer.ckpt");
    let restorer = if restorer_path.is_file() {
        let (h, t) = load_checkpoint(&restorer_path)?;
        Some((h.layout, t))
    } else {
        None
    };
    Ok(LoadedRun { header, params, train_cfg, snapshots, restorer })
}

fn has_segment(layout: &ParamLayout, prefix: &str) -> bool {
    layout.segments.iter().any(|s| s.name.starts_with(prefix))
}

/// Degraded probe images keyed by index only, shared across verbs.
fn degraded_probes(
    records: &[SceneRecord],
    seed: u64,
    mode: DegradationMode,
) -> anyhow::Result<Vec<(String, Tensor)>> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let d = val_degradation(seed, i, mode);
        let img = apply_tensor(&r.image, &r.depth, &d)?;
        out.push((r.id.clone(), img));
    }
    Ok(out)
}

#[derive(Serialize)]
struct FeatureShiftReport {
    threshold: f64,
    #[serde(rename = "delta-beta")]
    delta_beta: f64,
    #[serde(rename = "per-probe")]
    per_probe: Vec<f64>,
    mean: f64,
}

fn cmd_analyze(
    checkpoint: &Path,
    probe_set: &Path,
    out: &Path,
    seed: u64,
    degradation: Option<DegradationMode>,
) -> anyhow::Result<()> {
    let run = load_run(checkpoint)?;
    let mode = degradation
        .or(run.train_cfg.as_ref().map(|c| c.degradation))
        .unwrap_or(DegradationMode::Haze);
    let records = load_split(&resolve_manifest(probe_set, "val.jsonl")).context("load probe set")?;
    let records: Vec<SceneRecord> = records.into_iter().take(PROBE_LIMIT).collect();
    if records.is_empty() {
        bail!("probe set is empty");
    }
    let probes = degraded_probes(&records, seed, mode)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let pi = PowerIterConfig { max_iters: 100, tol: 1e-6, seed };
    let layout = run.header.layout.clone();
    let mut outputs: Vec<String> = Vec::new();

    // input-space spectral norms of whichever heads exist
    if has_segment(&layout, "detect.c1") {
        let f = detector_input_fn(run.params.clone(), layout.clone());
        let report = dataset_sweep(&f, &probes, &pi)?;
        write_report_csv(&report, &out.join("lipschitz-detector.csv"))?;
        write_report_json(&report, &out.join("lipschitz-detector.json"))?;
        outputs.push("lipschitz-detector.csv".into());
        outputs.push("lipschitz-detector.json".into());
    }
    let restorer_model: Option<(ParamLayout, Tensor)> = if has_segment(&layout, "restore.out") {
        Some((layout.clone(), run.params.clone()))
    } else {
        run.restorer.clone()
    };
    if let Some((r_layout, r_params)) = &restorer_model {
        let f = restorer_input_fn(r_params.clone(), r_layout.clone());
        let report = dataset_sweep(&f, &probes, &pi)?;
        write_report_csv(&report, &out.join("lipschitz-restorer.csv"))?;
        write_report_json(&report, &out.join("lipschitz-restorer.json"))?;
        outputs.push("lipschitz-restorer.csv".into());
        outputs.push("lipschitz-restorer.json".into());
    }

    // feature shift under a fixed haze-density change, always measured against
    // haze regardless of the training degradation
    let mut fractions = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let base = match val_degradation(seed, i, DegradationMode::Haze) {
            Degradation::Haze(p) => p,
            Degradation::Dark(_) => unreachable!("asked for haze"),
        };
        let x = apply_haze_tensor(&r.image, &r.depth, &base)?;
        let shifted = HazeParams { beta: base.beta + DELTA_BETA, ..base };
        let xs = apply_haze_tensor(&r.image, &r.depth, &shifted)?;
        let dx = xs.added(&x.scaled(-1.0))?;
        // the cascade's detector sees restored inputs, so its effective
        // feature extractor is the restorer composed with the backbone
        let frac = match (&run.restorer, has_segment(&layout, "backbone.s1")) {
            (Some((r_layout, r_params)), true) => {
                let rl = r_layout.clone();
                let rp = r_params.clone();
                let dl = layout.clone();
                let dp = run.params.clone();
                let feats = move |tape: &mut Tape, xn| {
                    let rpn = tape.constant(rp.clone())?;
                    let restored = restorer_forward(tape, xn, rpn, &rl)?;
                    let dpn = tape.constant(dp.clone())?;
                    let (f1, f2, f3, f4) =
                        lrod::model::backbone_forward(tape, restored, dpn, &dl)?;
                    Ok(vec![f1, f2, f3, f4])
                };
                feature_shift_fraction(&feats, &x, &dx, SHIFT_THRESHOLD)?
            }
            _ => {
                let feats = backbone_features_fn(run.params.clone(), layout.clone());
                feature_shift_fraction(&feats, &x, &dx, SHIFT_THRESHOLD)?
            }
        };
        fractions.push(frac);
    }
    let shift = FeatureShiftReport {
        threshold: SHIFT_THRESHOLD,
        delta_beta: DELTA_BETA,
        mean: fractions.iter().sum::<f64>() / fractions.len() as f64,
        per_probe: fractions,
    };
    fs::write(out.join("feature-shift.json"), canonical_json(&shift))
        .context("write feature-shift.json")?;
    outputs.push("feature-shift.json".into());

    // sensitivity to the haze density parameter itself
    if has_segment(&layout, "backbone.s1") {
        let mut csv = String::from("id,beta,dnorm\n");
        for (i, r) in records.iter().enumerate() {
            let p = match val_degradation(seed, i, DegradationMode::Haze) {
                Degradation::Haze(p) => p,
                Degradation::Dark(_) => unreachable!("asked for haze"),
            };
            let s = beta_sensitivity(&run.params, &layout, &r.image, &r.depth, &p)?;
            csv.push_str(&format!("{},{},{}\n", r.id, p.beta, s));
        }
        fs::write(out.join("beta-sensitivity.csv"), csv).context("write beta-sensitivity.csv")?;
        outputs.push("beta-sensitivity.csv".into());
    }

    // training-dynamics audit; needs snapshots plus a shared-backbone layout
    let audit_path = out.join("audit.csv");
    let auditable = run.snapshots.len() >= 2
        && has_segment(&layout, "restore.out")
        && run.train_cfg.is_some();
    if auditable {
        let cfg = run.train_cfg.as_ref().unwrap();
        let probe_imgs: Vec<Tensor> = probes.iter().map(|(_, t)| t.clone()).collect();
        let sample = AuditSample {
            degraded: probes[0].1.clone(),
            clean: records[0].image.clone(),
            boxes: records[0].boxes.clone(),
        };
        let trace = audit_checkpoints(
            &run.snapshots,
            &layout,
            cfg.model.num_classes,
            &probe_imgs,
            &sample,
            &cfg.effective_weights(),
            cfg.learning_rate,
            cfg.audit_every,
            &pi,
        )?;
        write_audit_csv(&trace, &audit_path)?;
    } else {
        // detector-only or bare-checkpoint runs have no joint dynamics to
        // audit; leave the header so downstream export stays uniform
        fs::write(&audit_path, "t,lip,gamma,xi,dlipdt,residual,a1,a2\n")
            .context("write audit.csv")?;
    }
    outputs.push("audit.csv".into());

    write_run_manifest(
        out,
        &RunManifest {
            verb: "analyze".into(),
            seed,
            config_sha256: sha256_hex(canonical_json(&run.train_cfg).as_bytes()),
            git_describe: lrod::report::git_describe(),
            outputs,
        },
    )?;
    println!("analyzed {} probes", probes.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// landscape

#[allow(clippy::too_many_arguments)]
fn cmd_landscape(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    n: usize,
    batch: usize,
    loss_sel: &str,
    mode: Option<TrainMode>,
) -> anyhow::Result<()> {
    let run = load_run(checkpoint)?;
    if let Some(m) = mode {
        let expect = match m {
            TrainMode::Cascade => "cascade-detector".to_string(),
            other => other.tag().to_string(),
        };
        if run.header.mode != expect {
            bail!("checkpoint mode {:?} does not match --mode {:?}", run.header.mode, expect);
        }
    }
    let cfg = run.train_cfg.clone().unwrap_or_default();
    let weights = cfg.effective_weights();
    let layout = run.header.layout.clone();
    let records = load_split(&resolve_manifest(data, "train.jsonl")).context("load batch scenes")?;
    let records: Vec<SceneRecord> = records.into_iter().take(batch).collect();
    if records.is_empty() {
        bail!("evaluation batch is empty");
    }
    let degraded = degraded_probes(&records, seed, cfg.degradation)?;

    // the cascade's detector is trained on restored inputs; freeze them once
    let inputs: Vec<Tensor> = match &run.restorer {
        Some((r_layout, r_params)) => {
            let mut v = Vec::with_capacity(degraded.len());
            for (_, img) in &degraded {
                let mut tape = Tape::new();
                let x = tape.constant(img.clone())?;
                let p = tape.constant(r_params.clone())?;
                let restored = restorer_forward(&mut tape, x, p, r_layout)?;
                v.push(tape.value(restored).clone());
            }
            v
        }
        None => degraded.iter().map(|(_, t)| t.clone()).collect(),
    };

    let has_det = has_segment(&layout, "detect.c1");
    let has_res = has_segment(&layout, "restore.out");
    let num_classes = cfg.model.num_classes;

    let det_loss = |theta: &Tensor| -> lrod::Result<f64> {
        let mut acc = 0.0;
        for (i, r) in records.iter().enumerate() {
            let (h, w) = (inputs[i].shape()[1], inputs[i].shape()[2]);
            let mut tape = Tape::new();
            let x = tape.constant(inputs[i].clone())?;
            let t = tape.constant(theta.clone())?;
            let det = detector_forward(&mut tape, x, t, &layout)?;
            let l = detection_loss(&mut tape, det, &r.boxes, h, w, num_classes)?;
            acc += tape.value(l).item();
        }
        Ok(acc / records.len() as f64)
    };
    let res_loss = |theta: &Tensor| -> lrod::Result<f64> {
        let mut acc = 0.0;
        for (i, r) in records.iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(inputs[i].clone())?;
            let t = tape.constant(theta.clone())?;
            let restored = restorer_forward(&mut tape, x, t, &layout)?;
            let clean = tape.constant(r.image.clone())?;
            let l = charbonnier_loss(&mut tape, restored, clean, weights.charbonnier_eps)?;
            acc += tape.value(l).item();
        }
        Ok(acc / records.len() as f64)
    };
    // total follows the training objective: penalty on the first sample only,
    // and terms the layout has no head for are absent rather than zero
    let total_loss_fn = |theta: &Tensor| -> lrod::Result<f64> {
        let mut acc = 0.0;
        for (i, r) in records.iter().enumerate() {
            let (h, w) = (inputs[i].shape()[1], inputs[i].shape()[2]);
            let mut tape = Tape::new();
            let x = tape.constant(inputs[i].clone())?;
            let t = tape.input(theta.clone())?;
            let (det, l_res) = if has_res {
                let (det, restored) = shared_forward(&mut tape, x, t, &layout)?;
                let clean = tape.constant(r.image.clone())?;
                let l = charbonnier_loss(&mut tape, restored, clean, weights.charbonnier_eps)?;
                (det, Some(l))
            } else {
                (detector_forward(&mut tape, x, t, &layout)?, None)
            };
            let l_det = detection_loss(&mut tape, det, &r.boxes, h, w, num_classes)?;
            let penalty = if has_res && weights.lambda_p != 0.0 && i == 0 {
                let range = layout.prefix_range(&["backbone.", "detect."])?;
                let pseed: u64 = rand::Rng::gen(&mut stream(seed, "landscape-penalty", 0));
                Some(param_grad_norm_penalty(&mut tape, det, t, Some(range), 2, pseed)?)
            } else {
                None
            };
            let l = total_loss(&mut tape, l_det, l_res, penalty, &weights)?;
            acc += tape.value(l).item();
        }
        Ok(acc / records.len() as f64)
    };

    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let (delta, eta, flagged) = sample_directions(&run.params, &layout, seed)?;
    if !flagged.is_empty() {
        eprintln!("note: zero-norm filters skipped in directions: {flagged:?}");
    }
    let mut outputs: Vec<String> = Vec::new();
    let mut scan_one = |name: &str, f: &dyn Fn(&Tensor) -> lrod::Result<f64>| -> anyhow::Result<()> {
        let g = |t: &Tensor| f(t);
        let grid = scan(&g, &run.params, &delta, &eta, (-1.0, 1.0), (-1.0, 1.0), n, (seed, seed))?;
        write_grid_csv(&grid, &out.join(format!("grid-{name}.csv")))?;
        write_grid_meta_json(&grid, &out.join(format!("grid-{name}.meta.json")))?;
        outputs.push(format!("grid-{name}.csv"));
        outputs.push(format!("grid-{name}.meta.json"));
        Ok(())
    };
    let want = |what: &str| loss_sel == "all" || loss_sel == what;
    if !["all", "det", "res", "total"].contains(&loss_sel) {
        bail!("--loss must be det, res, total or all, got {loss_sel:?}");
    }
    if want("det") && has_det {
        scan_one("det", &det_loss)?;
    }
    if want("res") && has_res {
        scan_one("res", &res_loss)?;
    }
    if want("total") {
        scan_one("total", &total_loss_fn)?;
    }

    if run.snapshots.len() >= 2 {
        let thetas: Vec<Tensor> = run.snapshots.iter().map(|(_, t)| t.clone()).collect();
        let steps: Vec<usize> = run.snapshots.iter().map(|(s, _)| *s).collect();
        let points = project_trajectory(&thetas, &delta, &eta)?;
        write_trajectory_csv(&points, &steps, &out.join("trajectory.csv"))?;
    } else {
        fs::write(out.join("trajectory.csv"), "step,alpha,beta\n").context("write trajectory.csv")?;
    }
    outputs.push("trajectory.csv".into());

    write_run_manifest(
        out,
        &RunManifest {
            verb: "landscape".into(),
            seed,
            config_sha256: sha256_hex(canonical_json(&cfg).as_bytes()),
            git_describe: lrod::report::git_describe(),
            outputs,
        },
    )?;
    println!("scanned {n}x{n} grid over {} samples", records.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    degradation: Option<DegradationMode>,
    score_threshold: f64,
    nms_iou: f64,
) -> anyhow::Result<()> {
    let run = load_run(checkpoint)?;
    let cfg = run.train_cfg.clone().unwrap_or_default();
    let mode = degradation.unwrap_or(cfg.degradation);
    let layout = run.header.layout.clone();
    if !has_segment(&layout, "detect.c1") {
        bail!("checkpoint {:?} has no detection head", run.header.mode);
    }
    let records = load_split(&resolve_manifest(data, "val.jsonl")).context("load val scenes")?;
    let degraded = degraded_probes(&records, seed, mode)?;
    let samples: Vec<(Tensor, Vec<lrod::scene::BoxLabel>)> = degraded
        .into_iter()
        .zip(&records)
        .map(|((_, img), r)| (img, r.boxes.clone()))
        .collect();

    let restorer = run.restorer.clone();
    let params = run.params.clone();
    let detect = move |img: &Tensor| -> lrod::Result<Tensor> {
        let mut tape = Tape::new();
        let mut x = tape.constant(img.clone())?;
        if let Some((r_layout, r_params)) = &restorer {
            let rp = tape.constant(r_params.clone())?;
            let restored = restorer_forward(&mut tape, x, rp, r_layout)?;
            x = tape.constant(tape.value(restored).clone())?;
        }
        let p = tape.constant(params.clone())?;
        let det = detector_forward(&mut tape, x, p, &layout)?;
        Ok(tape.value(det).clone())
    };
    let report = eval_map50(&detect, &samples, cfg.model.num_classes, score_threshold, nms_iou)?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    fs::write(out.join("eval.json"), canonical_json(&report)).context("write eval.json")?;
    write_run_manifest(
        out,
        &RunManifest {
            verb: "eval".into(),
            seed,
            config_sha256: sha256_hex(canonical_json(&cfg).as_bytes()),
            git_describe: lrod::report::git_describe(),
            outputs: vec!["eval.json".into()],
        },
    )?;
    println!("mAP@50 {:.4}", report.map50);
    Ok(())
}
