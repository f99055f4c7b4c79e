//! The `ci-engine` command line: data generation, the two stages of each
//! task as separate commands, evaluation, and whole-schedule runs over
//! several strategies and seeds.
//!
//! A step-by-step run directory (`train-initial`, `synthesize`, `increment`,
//! `evaluate`) holds:
//!
//! ```text
//! config.json              resolved configuration
//! state.json               progress, evaluations, hashes, seed ledger
//! checkpoints/task-N.ckpt  model after each task
//! class_means.ctar         class-mean images
//! impressions/phase-N/     synthesized replay of each phase
//! metrics.jsonl            mean loss parts per epoch
//! report.json, summary.txt, accuracy.svg
//! ```
//!
//! `run` writes one such directory per strategy and seed under
//! `OUT/<arm>/seed-<S>/` and an aggregate report in `OUT`.

mod config;
mod report;

pub use config::{
    DatasetSource, ExperimentConfig, OptimOverrides, Overrides, SynthesisOverrides, TrainOverrides,
};
pub use report::{
    accuracy_svg, arm_label, emit_report, summary_text, ArmReport, RunReport, SCHEMA_VERSION,
};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::load_checkpoint;
use crate::data::TaskSchedule;
use crate::engine::{
    checkpoint_path, evaluate, prepare_impressions, run_incremental_task, run_incremental_task_with,
    run_initial_task, Ablations, EngineConfig, ExperimentData, ExperimentState, MetricsReport,
    Profile, Strategy,
};
use crate::error::{Error, Result};
use crate::synthesis::{load_impressions, save_impressions};

#[derive(Parser, Debug)]
#[command(name = "ci-engine", version, about = "Data-free class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the desk dataset to a manifest directory.
    GenData(Common),
    /// Train the first task and record its class means.
    TrainInitial(Common),
    /// Synthesize replay for the next task from the latest checkpoint.
    Synthesize(Common),
    /// Train the next task on new data and the synthesized replay.
    Increment(Common),
    /// Evaluate a checkpoint on the test split over the classes it has seen.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the run directory's latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the whole schedule for every strategy and seed.
    Run(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategies: full, finetune, distill-only, oracle.
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated ablations: no-contrastive, no-margin, noise-init.
    #[arg(long)]
    ablate: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hyper-parameter profile: paper-supp-t2 or sane.
    #[arg(long)]
    profile: Option<String>,
}

fn flag_error(flag: &str, message: String) -> Error {
    Error::Config {
        path: format!("--{flag}"),
        message,
    }
}

impl Common {
    /// The experiment configuration with flags applied, and the output
    /// directory.
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Dependency {
                        path: p.clone(),
                        reason: "configuration file not found".into(),
                    });
                }
                ExperimentConfig::load(p)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.strategy {
            cfg.strategy = s
                .split(',')
                .map(|x| {
                    Strategy::parse(x.trim())
                        .ok_or_else(|| flag_error("strategy", format!("unknown strategy `{x}`")))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(a) = &self.ablate {
            cfg.ablations = Ablations::parse_list(a)
                .ok_or_else(|| flag_error("ablate", format!("unknown ablation in `{a}`")))?;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| flag_error("seeds", format!("`{x}` is not a seed")))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(p) = &self.profile {
            cfg.profile =
                Profile::parse(p).ok_or_else(|| flag_error("profile", format!("unknown profile `{p}`")))?;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        let out = cfg
            .out
            .clone()
            .ok_or_else(|| flag_error("out", "an output directory is required".into()))?;
        Ok((cfg, out))
    }

    /// As [`Common::resolve`] for commands that act on one run directory.
    fn resolve_single(&self) -> Result<(ExperimentConfig, EngineConfig, PathBuf)> {
        let (cfg, out) = self.resolve()?;
        if cfg.seeds.len() != 1 {
            return Err(flag_error("seeds", "this command takes a single seed".into()));
        }
        if cfg.strategy.len() != 1 {
            return Err(flag_error("strategy", "this command takes a single strategy".into()));
        }
        let engine = cfg.engine_config(cfg.strategy[0])?;
        Ok((cfg, engine, out))
    }
}

/// The resolved configuration written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub experiment: ExperimentConfig,
    pub engine: Vec<EngineConfig>,
}

impl ConfigSnapshot {
    fn new(experiment: &ExperimentConfig) -> Result<Self> {
        let engine = experiment
            .strategy
            .iter()
            .map(|s| experiment.engine_config(*s))
            .collect::<Result<_>>()?;
        Ok(ConfigSnapshot {
            experiment: experiment.clone(),
            engine,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Fails unless `dir` was started with the same engine settings.
    fn check_matches(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.json");
        if !p.exists() {
            return Err(Error::Dependency {
                path: p,
                reason: "run directory has no configuration; run train-initial first".into(),
            });
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let stored: ConfigSnapshot = serde_json::from_str(&text)?;
        if stored.engine != self.engine
            || stored.experiment.dataset != self.experiment.dataset
            || stored.experiment.split != self.experiment.split
            || stored.experiment.schedule != self.experiment.schedule
            || stored.experiment.seeds != self.experiment.seeds
        {
            return Err(Error::Incompatible(format!(
                "{} was written by a different configuration",
                p.display()
            )));
        }
        Ok(())
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Dataset(_) | Error::Label(_) | Error::Format(_) | Error::Io { .. } => 3,
        Error::Numeric(_) | Error::DegenerateNorm(_) | Error::Synthesis(_) => 4,
        Error::Dependency { .. } | Error::Incompatible(_) => 5,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::TrainInitial(c) => cmd_train_initial(c),
        Command::Synthesize(c) => cmd_synthesize(c),
        Command::Increment(c) => cmd_increment(c),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint.as_deref()),
        Command::Run(c) => cmd_run(c),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let (cfg, out) = c.resolve()?;
    if cfg.dataset.manifest.is_some() {
        return Err(Error::Config {
            path: "dataset.manifest".into(),
            message: "gen-data renders the desk dataset; remove the manifest entry".into(),
        });
    }
    let manifest = cfg.dataset()?.write(&out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn single_report(profile: Profile, run: MetricsReport) -> Result<RunReport> {
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        profile: profile.name().into(),
        arms: vec![ArmReport::new(vec![run])?],
    })
}

fn progress(state: &ExperimentState, arm: &str) {
    let avg = state.evaluations.last().and_then(|e| e.overall()).unwrap_or(0.0);
    eprintln!(
        "seed {} {arm}: task {}/{} done, average accuracy {:.1}%",
        state.seed,
        state.completed,
        state.schedule.tasks.len(),
        100.0 * avg
    );
}

fn load_state(
    cfg: &ExperimentConfig,
    engine: EngineConfig,
    out: &Path,
) -> Result<(ExperimentData, TaskSchedule, ExperimentState)> {
    ConfigSnapshot::new(cfg)?.check_matches(out)?;
    let (data, schedule) = cfg.experiment_data()?;
    let state = ExperimentState::load(out, engine, schedule.clone())?;
    if state.seed != cfg.seeds[0] {
        return Err(Error::Incompatible("run directory was started with another seed".into()));
    }
    Ok((data, schedule, state))
}

fn impressions_dir(out: &Path, phase: usize) -> PathBuf {
    out.join("impressions").join(format!("phase-{phase}"))
}

#[derive(Serialize, Deserialize)]
struct ImpressionSource {
    model: String,
}

fn cmd_train_initial(c: &Common) -> Result<()> {
    let (cfg, engine, out) = c.resolve_single()?;
    let (data, schedule) = cfg.experiment_data()?;
    for stale in ["checkpoints", "impressions"] {
        let p = out.join(stale);
        if p.is_dir() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let state = run_initial_task(&data, &schedule, &engine, cfg.seeds[0])?;
    progress(&state, engine.strategy.name());
    ConfigSnapshot::new(&cfg)?.write(&out)?;
    state.save(&out)?;
    emit_report(&single_report(cfg.profile, state.report())?, &out)
}

fn cmd_synthesize(c: &Common) -> Result<()> {
    let (cfg, engine, out) = c.resolve_single()?;
    let (data, _, mut state) = load_state(&cfg, engine, &out)?;
    let phase = state.completed + 1;
    match prepare_impressions(&mut state, &data)? {
        None => eprintln!("phase {phase} uses no replay; nothing to synthesize"),
        Some(set) => {
            let dir = impressions_dir(&out, phase);
            save_impressions(&set, &dir, data.dataset.manifest.normalization.as_ref())?;
            let source = ImpressionSource {
                model: state.checkpoints.last().cloned().unwrap_or_default(),
            };
            let p = dir.join("source.json");
            fs::write(&p, serde_json::to_string_pretty(&source)? + "\n").map_err(|e| Error::io(&p, e))?;
            eprintln!(
                "phase {phase}: {} images for classes {:?} in {}",
                set.len(),
                set.class_ids(),
                dir.display()
            );
        }
    }
    Ok(())
}

fn cmd_increment(c: &Common) -> Result<()> {
    let (cfg, engine, out) = c.resolve_single()?;
    let (data, _, mut state) = load_state(&cfg, engine, &out)?;
    let phase = state.completed + 1;
    let dir = impressions_dir(&out, phase);
    let impressions = if dir.join("impressions.json").exists() {
        let p = dir.join("source.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let source: ImpressionSource = serde_json::from_str(&text)?;
        if state.checkpoints.last() != Some(&source.model) {
            return Err(Error::Incompatible(format!(
                "{} was synthesized from another model; run synthesize again",
                dir.display()
            )));
        }
        Some(load_impressions(&dir)?)
    } else {
        None
    };
    let had_impressions = impressions.is_some();
    match run_incremental_task_with(&mut state, &data, impressions) {
        Err(Error::ReplayCoverage(_)) if !had_impressions => {
            return Err(Error::Dependency {
                path: dir,
                reason: "this phase replays synthesized images; run synthesize first".into(),
            })
        }
        r => r?,
    }
    progress(&state, state.config.strategy.name());
    state.save(&out)?;
    emit_report(&single_report(cfg.profile, state.report())?, &out)
}

/// Accuracy of one checkpoint on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEvaluation {
    pub checkpoint: PathBuf,
    pub fingerprint: String,
    pub seen_classes: Vec<u32>,
    pub accuracy: Option<f64>,
    pub per_class: std::collections::BTreeMap<u32, crate::engine::ClassCount>,
}

fn cmd_evaluate(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let (cfg, out) = c.resolve()?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let p = out.join("state.json");
            let text = fs::read_to_string(&p).map_err(|_| Error::Dependency {
                path: p.clone(),
                reason: "no experiment state; pass --checkpoint or run train-initial".into(),
            })?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let completed = v["completed"]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("{} lacks `completed`", p.display())))?;
            checkpoint_path(&out, completed as usize)
        }
    };
    if !ckpt.exists() {
        return Err(Error::Dependency {
            path: ckpt,
            reason: "checkpoint not found".into(),
        });
    }
    let model = load_checkpoint(&ckpt)?;
    let (data, _) = cfg.experiment_data()?;
    let eval = evaluate(&model, &data.dataset, &data.split.test)?;
    let result = CheckpointEvaluation {
        checkpoint: ckpt,
        fingerprint: model.fingerprint()?,
        seen_classes: model.seen_classes().to_vec(),
        accuracy: eval.overall(),
        per_class: eval.per_class.clone(),
    };
    for (k, n) in &result.per_class {
        println!(
            "class {k:>3}: {:>4}/{:<4} {:>6}",
            n.correct,
            n.total,
            n.accuracy().map(|a| format!("{:.1}%", 100.0 * a)).unwrap_or_else(|| "-".into())
        );
    }
    println!(
        "overall: {}",
        result.accuracy.map(|a| format!("{:.1}%", 100.0 * a)).unwrap_or_else(|| "-".into())
    );
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let p = out.join("evaluation.json");
    fs::write(&p, serde_json::to_string_pretty(&result)? + "\n").map_err(|e| Error::io(&p, e))
}

/// Runs every strategy for one seed; strategies share the first task's
/// model when their first phases agree.
fn run_seed(
    cfg: &ExperimentConfig,
    engines: &[EngineConfig],
    data: &ExperimentData,
    schedule: &TaskSchedule,
    seed: u64,
    out: &Path,
) -> Result<Vec<MetricsReport>> {
    let mut base: Option<ExperimentState> = None;
    let mut reports = Vec::new();
    for engine in engines {
        let mut state = match base.as_ref().map(|b| b.fork(engine.clone())) {
            Some(Ok(s)) => s,
            _ => {
                let s = run_initial_task(data, schedule, engine, seed)?;
                base.get_or_insert_with(|| s.clone());
                s
            }
        };
        let arm = arm_label(engine.strategy.name(), &engine.ablations.label());
        let dir = out.join(&arm).join(format!("seed-{seed}"));
        let mut single = cfg.clone();
        single.strategy = vec![engine.strategy];
        single.seeds = vec![seed];
        single.out = Some(dir.clone());
        ConfigSnapshot::new(&single)?.write(&dir)?;
        progress(&state, &arm);
        state.save(&dir)?;
        while state.completed < schedule.tasks.len() {
            run_incremental_task(&mut state, data)?;
            if let Some(set) = &state.impressions {
                let p = impressions_dir(&dir, state.completed);
                save_impressions(set, &p, data.dataset.manifest.normalization.as_ref())?;
            }
            progress(&state, &arm);
            state.save(&dir)?;
        }
        let report = state.report();
        emit_report(&single_report(cfg.profile, report.clone())?, &dir)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Upper bound on concurrent seed runs: `CI_ENGINE_THREADS`, else the
/// available parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("CI_ENGINE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config {
                path: "CI_ENGINE_THREADS".into(),
                message: format!("`{v}` is not a positive integer"),
            }),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs the whole schedule for every configured strategy and seed and writes
/// the aggregate report into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let threads = thread_cap()?;
    let (data, schedule) = cfg.experiment_data()?;
    let engines: Vec<EngineConfig> = cfg
        .strategy
        .iter()
        .map(|s| cfg.engine_config(*s))
        .collect::<Result<_>>()?;
    ConfigSnapshot::new(cfg)?.write(out)?;

    let mut per_seed: Vec<Result<Vec<MetricsReport>>> = Vec::new();
    for chunk in cfg.seeds.chunks(threads) {
        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let (engines, data, schedule) = (&engines, &data, &schedule);
                    scope.spawn(move || run_seed(cfg, engines, data, schedule, seed, out))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("a seed run panicked".into()))))
                .collect()
        });
        per_seed.extend(results);
    }
    let per_seed: Vec<Vec<MetricsReport>> = per_seed.into_iter().collect::<Result<_>>()?;
    let arms = (0..engines.len())
        .map(|a| ArmReport::new(per_seed.iter().map(|r| r[a].clone()).collect()))
        .collect::<Result<_>>()?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        profile: cfg.profile.name().into(),
        arms,
    };
    emit_report(&report, out)?;
    Ok(report)
}

fn cmd_run(c: &Common) -> Result<()> {
    let (cfg, out) = c.resolve()?;
    let report = run_experiment(&cfg, &out)?;
    print!("{}", summary_text(&report));
    Ok(())
}
