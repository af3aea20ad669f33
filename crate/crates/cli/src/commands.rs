//! Subcommands. Each one reads a config plus input artifacts, writes its
//! outputs into `--out-dir`, and finishes with a `manifest.json` there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dimlab_core::analysis::{
    grad_check, taylor_scaling, Coordinates, DenoiserBilevel, DenoiserObjective, GradCheckReport, Objective,
    QuadraticBilevel, QuadraticProbe, ScaledGradient, TaylorOptions, TaylorProbe,
};
use dimlab_core::attack::{attack_full, attack_lowrank, finetune_benign, AttackMethod, Monitor};
use dimlab_core::bilevel::{immunize, immunize_naive, Aborted, ImmunizationData, ImmunizationRun};
use dimlab_core::data::{make_concept_set, points, ConceptDataset, Role, Split};
use dimlab_core::diffcore::{ConditionedBatch, NoiseSchedule};
use dimlab_core::eval::{
    emit_report, evaluate_state, representation_noise, train_probe_with, MetricsReport, Provenance,
};
use dimlab_core::losses::{LossSelector, LossSpec};
use dimlab_core::model::{init_denoiser, DenoiserParams, PsiIndex};
use dimlab_core::scenario::{heldout_set, pretrain};
use dimlab_core::{seeding, Error};

use crate::config::{seed_stream, Config};
use crate::error::CliError;
use crate::manifest::{sha256_hex, Artifact, RunManifest, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION};

/// Flags shared by every run command.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving every output of the run.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Replaces the configuration's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    /// Generate the concept dataset with its D_M / D_A / D_S splits.
    MakeData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the undefended base denoiser.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Immunize a checkpoint (bi-level, or the naive joint loss when configured).
    Immunize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune a checkpoint on a target concept and trace the metrics.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Metric grid over one or more checkpoints (`--checkpoint [label=]path`, repeatable).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
    },
    /// Gradient checks of every loss and the Taylor scaling sweep.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Defaults to a dataset generated from the configuration.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to a fresh model of `analysis.arch`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run the harness on quadratic objectives instead of the denoiser.
        #[arg(long)]
        quadratic: bool,
        /// Test seam: scale the analytic gradient of this loss by 1.01.
        #[arg(long, hide = true)]
        corrupt_gradient: Option<String>,
    },
    /// Re-run the command recorded in a manifest into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::MakeData { .. } => "make-data",
            Invocation::Pretrain { .. } => "pretrain",
            Invocation::Immunize { .. } => "immunize",
            Invocation::Attack { .. } => "attack",
            Invocation::Eval { .. } => "eval",
            Invocation::Analyze { .. } => "analyze",
            Invocation::Replay { .. } => "replay",
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Invocation::MakeData { common }
            | Invocation::Pretrain { common, .. }
            | Invocation::Immunize { common, .. }
            | Invocation::Attack { common, .. }
            | Invocation::Eval { common, .. }
            | Invocation::Analyze { common, .. } => Some(common),
            Invocation::Replay { .. } => None,
        }
    }
}

/// Files a command wrote, plus a failure to report once the manifest is down.
struct Outcome {
    outputs: Vec<PathBuf>,
    failure: Option<CliError>,
}

impl Outcome {
    fn ok(outputs: Vec<PathBuf>) -> Self {
        Self { outputs, failure: None }
    }
}

/// Runs `inv` on a pool of `threads` workers (0 = one per core).
pub fn execute(inv: &Invocation, threads: usize) -> Result<RunManifest, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    pool.install(|| match inv {
        Invocation::Replay { manifest, out_dir } => replay(manifest, out_dir, threads),
        _ => run(inv, threads),
    })
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

fn existing(path: &Path) -> Result<PathBuf, CliError> {
    std::fs::canonicalize(path).map_err(|e| CliError::io(path, e))
}

fn run(inv: &Invocation, threads: usize) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    let mut recorded = inv.clone();
    let common = recorded.common_mut().expect("run commands carry common flags");
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed.take() {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&common.out_dir).map_err(|e| CliError::io(&common.out_dir, e))?;
    let out = existing(&common.out_dir)?;
    common.out_dir = out.clone();
    common.config = out.join("config.toml");
    let config_text = cfg.to_toml();

    let inputs: Vec<PathBuf> = match &mut recorded {
        Invocation::Pretrain { dataset, .. } => vec![canonical_in_place(dataset)?],
        Invocation::Immunize { dataset, checkpoint, .. } | Invocation::Attack { dataset, checkpoint, .. } => {
            vec![canonical_in_place(dataset)?, canonical_in_place(checkpoint)?]
        }
        Invocation::Eval { dataset, checkpoints, .. } => {
            let mut v = vec![canonical_in_place(dataset)?];
            for spec in checkpoints.iter_mut() {
                let (label, path) = split_label(spec);
                let path = existing(&path)?;
                *spec = format!("{label}={}", path.display());
                v.push(path);
            }
            v
        }
        Invocation::Analyze { dataset, checkpoint, .. } => {
            let mut v = Vec::new();
            for p in [dataset, checkpoint].into_iter().flatten() {
                v.push(canonical_in_place(p)?);
            }
            v
        }
        Invocation::MakeData { .. } | Invocation::Replay { .. } => Vec::new(),
    };
    let input_artifacts = inputs.iter().map(|p| Artifact::of(p)).collect::<Result<Vec<_>, _>>()?;

    let outcome = match &recorded {
        Invocation::MakeData { .. } => make_data(&cfg, &out)?,
        Invocation::Pretrain { dataset, .. } => cmd_pretrain(&cfg, dataset, &out)?,
        Invocation::Immunize { dataset, checkpoint, .. } => cmd_immunize(&cfg, dataset, checkpoint, &out)?,
        Invocation::Attack { dataset, checkpoint, .. } => cmd_attack(&cfg, dataset, checkpoint, &out)?,
        Invocation::Eval { dataset, checkpoints, .. } => cmd_eval(&cfg, dataset, checkpoints, &out)?,
        Invocation::Analyze {
            dataset,
            checkpoint,
            quadratic,
            corrupt_gradient,
            ..
        } => cmd_analyze(&cfg, dataset.as_deref(), checkpoint.as_deref(), *quadratic, corrupt_gradient.as_deref(), &out)?,
        Invocation::Replay { .. } => unreachable!("handled by execute"),
    };

    let config_path = out.join("config.toml");
    write(&config_path, &config_text)?;
    let mut outputs = vec![config_path];
    outputs.extend(outcome.outputs);
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: recorded.name().to_string(),
        invocation: recorded,
        config_hash: sha256_hex(config_text.as_bytes()),
        config: config_text,
        input_artifact_paths: input_artifacts,
        output_paths: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
        wall_time: started.elapsed().as_secs_f64(),
        threads,
    };
    manifest.save(&out)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn canonical_in_place(path: &mut PathBuf) -> Result<PathBuf, CliError> {
    *path = existing(path)?;
    Ok(path.clone())
}

/// `label=path`, or a bare path labelled by its file stem.
fn split_label(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (label, path)
        }
    }
}

fn replay(manifest_path: &Path, out_dir: &Path, threads: usize) -> Result<RunManifest, CliError> {
    let m = RunManifest::load(manifest_path)?;
    if sha256_hex(m.config.as_bytes()) != m.config_hash {
        return Err(CliError::Validation(format!(
            "{}: recorded config does not match its hash",
            manifest_path.display()
        )));
    }
    for input in &m.input_artifact_paths {
        input.verify()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let out = absolute(out_dir)?;
    let config_path = out.join("config.toml");
    write(&config_path, &m.config)?;
    let mut inv = m.invocation.clone();
    let common = inv
        .common_mut()
        .ok_or_else(|| CliError::Validation("a manifest cannot record a replay".into()))?;
    common.config = config_path;
    common.out_dir = out;
    common.seed = None;
    run(&inv, threads)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_dataset(path: &Path) -> Result<ConceptDataset, CliError> {
    Ok(ConceptDataset::load(path)?)
}

fn load_params(path: &Path) -> Result<DenoiserParams, CliError> {
    Ok(DenoiserParams::load(path)?)
}

fn save_params(params: &DenoiserParams, path: &Path) -> Result<PathBuf, CliError> {
    params.save(path)?;
    Ok(path.to_path_buf())
}

// ---------------------------------------------------------------- make-data / pretrain

fn dataset_from_config(cfg: &Config) -> Result<ConceptDataset, CliError> {
    Ok(make_concept_set(
        &cfg.data.concepts,
        cfg.data.counts(),
        cfg.seed_for(seed_stream::DATA),
    )?)
}

fn make_data(cfg: &Config, out: &Path) -> Result<Outcome, CliError> {
    let ds = dataset_from_config(cfg)?;
    let path = out.join("dataset.json");
    ds.save(&path)?;
    Ok(Outcome::ok(vec![path]))
}

fn cmd_pretrain(cfg: &Config, dataset: &Path, out: &Path) -> Result<Outcome, CliError> {
    let ds = load_dataset(dataset)?;
    let schedule = cfg.schedule()?;
    let (params, losses) = pretrain(&ds, &cfg.model.arch, &schedule, &cfg.pretrain, cfg.seed_for(seed_stream::PRETRAIN))?;
    let ckpt = save_params(&params, &out.join("checkpoint.json"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    let loss_path = out.join("pretrain_loss.csv");
    write(&loss_path, &csv)?;
    Ok(Outcome::ok(vec![ckpt, loss_path]))
}

// ---------------------------------------------------------------- immunize

pub const NOISE_PROBE_HEADER: &str = "iteration,noise";

fn cmd_immunize(cfg: &Config, dataset: &Path, checkpoint: &Path, out: &Path) -> Result<Outcome, CliError> {
    let ds = load_dataset(dataset)?;
    let params = load_params(checkpoint)?;
    let schedule = cfg.schedule()?;
    let imm_cfg = cfg.immunization();
    let result = if cfg.immunize.naive {
        immunize_naive(&params, &ds, &schedule, &imm_cfg)
    } else {
        immunize(&params, &ds, &schedule, &imm_cfg)
    };
    let history_path = out.join("history.csv");
    let (immunized, run) = match result {
        Ok(r) => r,
        Err(Aborted { run, last_params, source }) => {
            write(&history_path, &run.history_csv())?;
            save_params(&last_params, &out.join("aborted_last.json"))?;
            return Err(CliError::from(source));
        }
    };
    let mut outputs = vec![save_params(&immunized, &out.join("immunized.json"))?];
    write(&history_path, &run.history_csv())?;
    outputs.push(history_path);
    if !run.checkpoints.is_empty() {
        let dir = out.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (iteration, p) in &run.checkpoints {
            outputs.push(save_params(p, &dir.join(format!("iter_{iteration:05}.json")))?);
        }
    }
    let probe_path = out.join("noise_probe.csv");
    write(&probe_path, &noise_probe_csv(cfg, &ds, &params, &run, &schedule)?)?;
    outputs.push(probe_path);
    Ok(Outcome::ok(outputs))
}

/// The noising loss on the fixed `D_M` batch at the starting point and at
/// every checkpoint.
fn noise_probe_csv(
    cfg: &Config,
    ds: &ConceptDataset,
    start: &DenoiserParams,
    run: &ImmunizationRun,
    schedule: &NoiseSchedule,
) -> Result<String, CliError> {
    let batch = ImmunizationData::from_dataset(ds, start)?.malicious;
    let seed = cfg.seed_for(seed_stream::EVAL);
    let mut csv = format!("{NOISE_PROBE_HEADER}\n");
    let states = std::iter::once((0, start)).chain(run.checkpoints.iter().map(|(i, p)| (*i, p)));
    for (iteration, p) in states {
        let v = representation_noise(p, &batch, schedule, cfg.immunize.noise, seed)?;
        let _ = writeln!(csv, "{iteration},{v}");
    }
    Ok(csv)
}

// ---------------------------------------------------------------- attack

/// Held-out `D_S` rows of every safe concept `params` has a token for.
fn safe_heldout(held: &ConceptDataset, params: &DenoiserParams) -> Result<Option<ConditionedBatch>, CliError> {
    let mut x0 = Array2::zeros((0, 2));
    let mut tokens = Vec::new();
    for c in held.concepts_with_role(Role::Safe) {
        let token = params.token_for(c.id);
        if !params.has_token(token) {
            continue;
        }
        let rows = held.split_view(Split::Safe, Some(c.id))?;
        x0.append(ndarray::Axis(0), points(&rows).view()).expect("two columns");
        tokens.extend(std::iter::repeat_n(token, rows.len()));
    }
    if tokens.is_empty() {
        return Ok(None);
    }
    Ok(Some(ConditionedBatch::new(x0, tokens)?))
}

/// The probe, or `None` with the reason when the concepts are not separable.
fn probe_or_reason(
    cfg: &Config,
    ds: &ConceptDataset,
) -> Result<(Option<dimlab_core::eval::ProbeClassifier>, Option<String>), CliError> {
    match train_probe_with(ds, cfg.seed_for(seed_stream::PROBE), &cfg.eval.probe) {
        Ok(p) => Ok((Some(p), None)),
        Err(e @ Error::Inseparable { .. }) => Ok((None, Some(e.to_string()))),
        Err(e) => Err(e.into()),
    }
}

fn cmd_attack(cfg: &Config, dataset: &Path, checkpoint: &Path, out: &Path) -> Result<Outcome, CliError> {
    let ds = load_dataset(dataset)?;
    let params = load_params(checkpoint)?;
    let schedule = cfg.schedule()?;
    let acfg = cfg.attack();
    acfg.validate()?;
    let target = ds.concept(acfg.target_concept)?.id;
    let held = heldout_set(&ds)?;
    let wants_samples = cfg.attack.monitor_samples > 0;
    let (probe, absent) = if wants_samples { probe_or_reason(cfg, &ds)? } else { (None, None) };
    if let Some(reason) = &absent {
        eprintln!("warning: probe accuracy will be recorded as NA: {reason}");
    }
    let reference = points(&held.concept_samples(target)?);
    let safe = safe_heldout(&held, &params)?;
    let monitor = Monitor {
        every: cfg.attack.monitor_every,
        probe: probe.as_ref(),
        reference: wants_samples.then(|| reference.view()),
        safe: safe.as_ref(),
        samples: cfg.attack.monitor_samples,
        seed: cfg.seed_for(seed_stream::EVAL),
    };
    let mut outputs = Vec::new();
    let trace = match acfg.method {
        AttackMethod::FullFinetune => {
            let (p, trace) = attack_full(&params, &ds, &schedule, &acfg, &monitor)?;
            outputs.push(save_params(&p, &out.join("attacked.json"))?);
            trace
        }
        AttackMethod::BenignPi => {
            let (p, trace) = finetune_benign(&params, &ds, &schedule, &acfg, &monitor)?;
            outputs.push(save_params(&p, &out.join("attacked.json"))?);
            trace
        }
        AttackMethod::LowrankAdapter => {
            let (a, trace) = attack_lowrank(&params, &ds, &schedule, &acfg, &monitor)?;
            let adapter_path = out.join("adapter.json");
            let text = serde_json::to_string(&a.adapter).expect("adapter serializes");
            write(&adapter_path, &text)?;
            outputs.push(adapter_path);
            outputs.push(save_params(&a.merged()?, &out.join("attacked.json"))?);
            trace
        }
    };
    let trace_path = out.join("trace.csv");
    write(&trace_path, &trace.to_csv())?;
    outputs.push(trace_path);
    Ok(Outcome::ok(outputs))
}

// ---------------------------------------------------------------- eval

fn cmd_eval(cfg: &Config, dataset: &Path, checkpoints: &[String], out: &Path) -> Result<Outcome, CliError> {
    let ds = load_dataset(dataset)?;
    let held = heldout_set(&ds)?;
    let schedule = cfg.schedule()?;
    let ecfg = cfg.eval();
    let (probe, absent) = probe_or_reason(cfg, &ds)?;
    let states: Vec<(String, PathBuf)> = checkpoints.iter().map(|s| split_label(s)).collect();
    let grids = states
        .par_iter()
        .map(|(label, path)| {
            let params = load_params(path)?;
            Ok(evaluate_state(label, &params, &held, probe.as_ref(), &schedule, &ecfg)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let provenance = states
        .iter()
        .map(|(label, path)| Provenance {
            run: label.clone(),
            config_hash: producing_config_hash(path),
        })
        .collect();
    let mut report = MetricsReport::new(grids.into_iter().flatten().collect(), provenance)?;
    report.notes = eval_notes(absent, &held);
    Ok(Outcome::ok(emit_report(&report, out)?))
}

/// Config hash from the manifest next to `checkpoint`, when there is one.
fn producing_config_hash(checkpoint: &Path) -> String {
    checkpoint
        .parent()
        .map(|d| d.join(MANIFEST_FILE))
        .and_then(|m| RunManifest::load(&m).ok())
        .map_or_else(|| "unknown".to_string(), |m| m.config_hash)
}

fn eval_notes(absent_probe: Option<String>, held: &ConceptDataset) -> BTreeMap<String, String> {
    let mut notes = BTreeMap::new();
    notes.insert(
        "heldout".into(),
        format!(
            "independent draws: {} D_M + {} D_A per malicious concept, {} D_S per safe concept",
            held.counts.defense, held.counts.attack, held.counts.safe
        ),
    );
    notes.insert(
        "mmd".into(),
        "unbiased squared MMD, Gaussian kernel, median-heuristic bandwidth per cell".into(),
    );
    notes.insert(
        "absent".into(),
        "NA marks a metric that was not computed; concepts without a token in a state have every column NA".into(),
    );
    if let Some(reason) = absent_probe {
        notes.insert("probe_accuracy".into(), format!("absent: {reason}"));
    }
    notes
}

// ---------------------------------------------------------------- analyze

pub const GRADCHECK_HEADER: &str = "loss,coordinates,max_rel_error,worst_index,analytic,numeric,passed";
pub const TAYLOR_HEADER: &str = "alpha_p,residual";

const SELECTORS: [LossSelector; 4] = [
    LossSelector::Prior,
    LossSelector::Max,
    LossSelector::Noise,
    LossSelector::Immunize,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub mode: String,
    pub parameters: usize,
    pub gradient_checks: Vec<(String, GradCheckReport)>,
    pub failing_losses: Vec<String>,
    pub taylor: TaylorProbe,
}

fn check_one<O: Objective + Sync>(
    objective: O,
    theta: &[f64],
    corrupt: bool,
    h: f64,
    tol: f64,
    coords: Coordinates,
) -> Result<GradCheckReport, CliError> {
    let report = if corrupt {
        grad_check(&ScaledGradient { inner: objective, factor: 1.01 }, theta, h, tol, coords)?
    } else {
        grad_check(&objective, theta, h, tol, coords)?
    };
    Ok(report)
}

fn cmd_analyze(
    cfg: &Config,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
    quadratic: bool,
    corrupt: Option<&str>,
    out: &Path,
) -> Result<Outcome, CliError> {
    if let Some(name) = corrupt {
        if !SELECTORS.iter().any(|s| s.name() == name) {
            return Err(CliError::Validation(format!(
                "--corrupt-gradient expects one of prior, max, noise, immunize; got {name:?}"
            )));
        }
    }
    let a = &cfg.analysis;
    let seed = cfg.seed_for(seed_stream::ANALYSIS);
    let summary = if quadratic {
        let dim = a.quadratic_dim.max(2);
        let theta: Vec<f64> = (0..dim).map(|i| (i as f64 / dim as f64) - 0.5).collect();
        let checks = SELECTORS
            .par_iter()
            .map(|s| {
                let r = check_one(QuadraticProbe { dim }, &theta, corrupt == Some(s.name()), a.h, a.tol, Coordinates::All)?;
                Ok((s.name().to_string(), r))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let psi = PsiIndex::from_ranges(vec![[0, dim / 2]]);
        let obj = QuadraticBilevel::random(dim, psi, seed);
        let taylor = taylor_scaling(&obj, &theta, &a.alpha_grid, a.alpha_i, TaylorOptions::default())?;
        summarize("quadratic", dim, checks, taylor)
    } else {
        let ds = match dataset {
            Some(p) => load_dataset(p)?,
            None => dataset_from_config(cfg)?,
        };
        let params = match checkpoint {
            Some(p) => load_params(p)?,
            None => init_denoiser(&a.arch, seed)?,
        };
        let schedule = cfg.schedule()?;
        let (safe, malicious) = analysis_batches(&ds, &params, a.batch_size)?;
        let coords = if params.len() <= a.max_coordinates {
            Coordinates::All
        } else {
            Coordinates::Sample {
                count: a.max_coordinates,
                seed,
            }
        };
        let checks = SELECTORS
            .par_iter()
            .map(|&s| {
                let spec = match s {
                    LossSelector::Immunize => LossSpec::immunize(a.beta, cfg.immunize.noise),
                    _ => {
                        let mut spec = LossSpec::new(s);
                        spec.noise = cfg.immunize.noise;
                        spec
                    }
                };
                let batch = if s == LossSelector::Prior { &safe } else { &malicious };
                let mut rng = seeding::rng_from(seed, &[s as u64]);
                let obj = DenoiserObjective::new(&params, spec, batch, &schedule, &mut rng)?;
                let r = check_one(obj, &params.theta, corrupt == Some(s.name()), a.h, a.tol, coords)?;
                Ok((s.name().to_string(), r))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut rng = seeding::rng_from(seed, &[99]);
        let obj = DenoiserBilevel::new(&params, &safe, &malicious, &schedule, a.beta, cfg.immunize.noise, &mut rng)?;
        let taylor = taylor_scaling(&obj, &params.theta, &a.alpha_grid, a.alpha_i, TaylorOptions::default())?;
        summarize("denoiser", params.len(), checks, taylor)
    };

    let mut grad_csv = format!("{GRADCHECK_HEADER}\n");
    for (name, r) in &summary.gradient_checks {
        let _ = writeln!(
            grad_csv,
            "{name},{},{},{},{},{},{}",
            r.checked, r.max_rel_error, r.worst_index, r.analytic_at_worst, r.numeric_at_worst, r.passed
        );
    }
    let mut taylor_csv = format!("{TAYLOR_HEADER}\n");
    for (alpha, r) in summary.taylor.alpha_p_grid.iter().zip(&summary.taylor.residual_norms) {
        let _ = writeln!(taylor_csv, "{alpha},{r}");
    }
    let grad_path = out.join("gradcheck.csv");
    let taylor_path = out.join("taylor.csv");
    let summary_path = out.join("summary.json");
    write(&grad_path, &grad_csv)?;
    write(&taylor_path, &taylor_csv)?;
    write(&summary_path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    let failure = (!summary.failing_losses.is_empty()).then(|| {
        CliError::Numerical(format!(
            "gradient check failed for: {}",
            summary.failing_losses.join(", ")
        ))
    });
    Ok(Outcome {
        outputs: vec![grad_path, taylor_path, summary_path],
        failure,
    })
}

fn summarize(
    mode: &str,
    parameters: usize,
    gradient_checks: Vec<(String, GradCheckReport)>,
    taylor: TaylorProbe,
) -> AnalysisSummary {
    let failing_losses = gradient_checks
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, _)| n.clone())
        .collect();
    AnalysisSummary {
        mode: mode.to_string(),
        parameters,
        gradient_checks,
        failing_losses,
        taylor,
    }
}

/// The first `n` `D_S` rows of a safe concept and `D_M` rows of a malicious
/// one, both with tokens in `params`.
fn analysis_batches(
    ds: &ConceptDataset,
    params: &DenoiserParams,
    n: usize,
) -> Result<(ConditionedBatch, ConditionedBatch), CliError> {
    let pick = |role: Role, split: Split| -> Result<ConditionedBatch, CliError> {
        let c = ds
            .concepts_with_role(role)
            .find(|c| params.has_token(params.token_for(c.id)))
            .ok_or_else(|| CliError::Validation(format!("no {role:?} concept has a token in the model")))?;
        let rows = ds.split_view(split, Some(c.id))?;
        let take = n.min(rows.len()).max(1);
        if rows.is_empty() {
            return Err(Error::InsufficientData(format!("no {split} rows for concept {}", c.id)).into());
        }
        Ok(ConditionedBatch::with_token(&rows[..take], params.token_for(c.id)))
    };
    Ok((pick(Role::Safe, Split::Safe)?, pick(Role::Malicious, Split::Defense)?))
}
