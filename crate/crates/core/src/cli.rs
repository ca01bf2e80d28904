//! Command-line front end: `gen-data`, `train`, `check`, `report`, `replay`.
//!
//! Training runs are configured with flat `section.key = value` text. Blank
//! lines and `#` comments are ignored; unknown keys are errors. Keys:
//!
//! | key | default |
//! |-----|---------|
//! | `data.train`, `data.test` | required; relative paths resolve against the config file |
//! | `model.hidden` | `64,32` |
//! | `train.lr`, `train.momentum`, `train.weight_decay` | `0.05`, `0.9`, `0.0005` |
//! | `train.epochs`, `train.batch_size` | `60`, `64` |
//! | `train.lr_schedule` | `30:0.1,45:0.1` (`epoch:multiplier` pairs, `none` for constant) |
//! | `train.seed`, `train.ema_beta`, `train.eval_every` | `0`, `0.9`, `1` |
//! | `train.diagnostics`, `train.check_directions`, `train.wall_clock` | `true`, `false`, `false` |
//! | `method.name` | `none` (`clip`, `noise`, `sam`, `lpg_closed_form`, `lpg_pgd`) |
//! | `method.tau_clip`, `method.sigma`, `method.rho` | `1.0`, `0.01`, `0.05` |
//! | `method.scope` | `per_sample` (or `class_mean`) |
//! | `method.steps`, `method.step` | `3`, `bound_over_steps` (or a number) |
//! | `plan.split` | `accuracy` (`frequency`, `variance`) |
//! | `plan.eps`, `plan.delta_eps` | `0.1`, `0.2` |
//! | `plan.tau` | `0.5` for accuracy, `median` otherwise |
//! | `train.label` | none; a free-form name shown by `report` |
//! | `output.dir` | required |
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort,
//! 4 failed check suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, CheckReport};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::math::Rng;
use crate::perturb::{ClosedFormScope, PerturbMethod, PgdStep, DEFAULT_PGD_STEPS};
use crate::schedule::{PlanConfig, SplitMode, Threshold};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "lpg", version, about = "Gradient-perturbation training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Balanced,
    Longtail,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "balanced")]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// samples per class before any long-tail subsampling
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// largest-to-smallest class count for `longtail`
    #[arg(long, default_value_t = 100.0)]
    pub ratio: f64,
    /// flip probability for `noisy`
    #[arg(long, default_value_t = 0.4)]
    pub rate: f64,
    /// comma-separated classes eligible for flips (default: all)
    #[arg(long, value_delimiter = ',')]
    pub noisy_classes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// also write a balanced, clean test set here
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset
    GenData(GenDataArgs),
    /// Train from a config file (or a run manifest)
    Train { config: PathBuf },
    /// Run numerical checks: all, grads, duality, pgd, sam
    Check {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// directory for the text and JSON reports
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare metrics files
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// write the table as CSV here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest
    Replay { manifest: PathBuf },
}

/// Everything needed to repeat a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// fully resolved settings (config keys for `train`, flags for `gen-data`)
    pub config: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parse arguments (including the program name) and run; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(args) => cmd_gen_data(&args).map(|_| EXIT_OK),
        Command::Train { config } => cmd_train(&config),
        Command::Check { suite, seed, out } => cmd_check(&suite, seed, out.as_deref()),
        Command::Report { metrics, csv } => {
            let text = cmd_report(&metrics, csv.as_deref())?;
            print!("{text}");
            Ok(EXIT_OK)
        }
        Command::Replay { manifest } => cmd_replay(&manifest),
    }
}

// ---------------------------------------------------------------- gen-data

fn gen_datasets(args: &GenDataArgs) -> Result<(Dataset, Option<Dataset>)> {
    let root = Rng::new(args.seed);
    let base = data::gen_gaussian_mixture(
        args.classes,
        args.dim,
        args.per_class,
        args.separation,
        &mut root.substream("data.train"),
    )?;
    let train = match args.scenario {
        Scenario::Balanced => base,
        Scenario::Longtail => {
            data::gen_longtail(&base, args.ratio, &mut root.substream("data.longtail"))?
        }
        Scenario::Noisy => data::inject_symmetric_noise(
            &base,
            args.rate,
            &mut root.substream("data.noise"),
            args.noisy_classes.as_deref(),
        )?,
    };
    let test = match args.test_out {
        Some(_) => Some(data::gen_gaussian_mixture(
            args.classes,
            args.dim,
            args.test_per_class,
            args.separation,
            &mut root.substream("data.test"),
        )?),
        None => None,
    };
    Ok((train, test))
}

fn manifest_path_for(data_path: &Path) -> PathBuf {
    let mut name = data_path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    data_path.with_file_name(name)
}

fn gen_data_settings(args: &GenDataArgs) -> Result<BTreeMap<String, String>> {
    let value = serde_json::to_value(args)?;
    let obj = value.as_object().expect("struct serialises to an object");
    Ok(obj
        .iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(k, v)| {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (k.clone(), s)
        })
        .collect())
}

fn gen_data_from_settings(settings: &BTreeMap<String, String>) -> Result<GenDataArgs> {
    let mut obj = serde_json::Map::new();
    for (k, v) in settings {
        let parsed =
            serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.clone()));
        obj.insert(k.clone(), parsed);
    }
    Ok(serde_json::from_value(serde_json::Value::Object(obj))?)
}

/// Write the dataset(s) and a manifest next to `--out`.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<RunManifest> {
    let (train, test) = gen_datasets(args)?;
    let mut artifacts = BTreeMap::new();
    train.save(&args.out)?;
    artifacts.insert("train".into(), args.out.display().to_string());
    if let (Some(path), Some(test)) = (&args.test_out, &test) {
        test.save(path)?;
        artifacts.insert("test".into(), path.display().to_string());
    }
    let manifest_path = manifest_path_for(&args.out);
    artifacts.insert("manifest".into(), manifest_path.display().to_string());
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "gen-data".into(),
        seed: args.seed,
        config: gen_data_settings(args)?,
        artifacts,
    };
    manifest.save(&manifest_path)?;
    log::info!(
        "wrote {} samples (counts {:?}) to {}",
        train.len(),
        train.class_counts(),
        args.out.display()
    );
    Ok(manifest)
}

// ---------------------------------------------------------------- config

/// A parsed and fully resolved training config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
}

const KEYS: [&str; 28] = [
    "data.train",
    "data.test",
    "model.hidden",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.epochs",
    "train.batch_size",
    "train.lr_schedule",
    "train.seed",
    "train.ema_beta",
    "train.eval_every",
    "train.diagnostics",
    "train.check_directions",
    "train.wall_clock",
    "method.name",
    "method.tau_clip",
    "method.sigma",
    "method.rho",
    "method.scope",
    "method.steps",
    "method.step",
    "plan.split",
    "plan.eps",
    "plan.delta_eps",
    "plan.tau",
    "output.dir",
    "train.label",
];

/// Parse `key = value` lines into a map; rejects unknown and repeated keys.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let loc = format!("line {}", i + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(&loc, format!("expected 'key = value', got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("{loc}: unknown key '{k}'")));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("{loc}: key '{k}' given twice")));
        }
    }
    Ok(map)
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value '{v}' for {key}"))),
    }
}

fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let (e, m) = item.trim().split_once(':').ok_or_else(|| {
                Error::Config(format!(
                    "lr schedule entry '{item}' is not epoch:multiplier"
                ))
            })?;
            let e = e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad epoch in '{item}'")))?;
            let m = m
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad multiplier in '{item}'")))?;
            Ok((e, m))
        })
        .collect()
}

fn format_schedule(s: &[(usize, f64)]) -> String {
    if s.is_empty() {
        return "none".into();
    }
    s.iter()
        .map(|(e, m)| format!("{e}:{m}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn resolve_path(base: &Path, p: &str) -> PathBuf {
    let p = base.join(p);
    std::path::absolute(&p).unwrap_or(p)
}

/// Turn a key map into a run config; relative paths resolve against `base`.
pub fn build_run_config(map: &BTreeMap<String, String>, base: &Path) -> Result<RunConfig> {
    let d = TrainConfig::default();
    let required = |k: &str| {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing required key '{k}'")))
    };
    let hidden = match map.get("model.hidden").map(String::as_str) {
        None => d.hidden.clone(),
        Some("") | Some("none") => Vec::new(),
        Some(v) => v
            .split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad width '{w}' in model.hidden")))
            })
            .collect::<Result<_>>()?,
    };
    let name = map.get("method.name").map(String::as_str).unwrap_or("none");
    let method = match name {
        "none" => PerturbMethod::NoPerturb,
        "clip" => PerturbMethod::Clip {
            tau_clip: get(map, "method.tau_clip", 1.0)?,
        },
        "noise" => PerturbMethod::Noise {
            sigma: get(map, "method.sigma", 0.01)?,
        },
        "sam" => PerturbMethod::Sam {
            rho: get(map, "method.rho", 0.05)?,
        },
        "lpg_closed_form" => PerturbMethod::LpgClosedForm {
            scope: match map
                .get("method.scope")
                .map(String::as_str)
                .unwrap_or("per_sample")
            {
                "per_sample" => ClosedFormScope::PerSample,
                "class_mean" => ClosedFormScope::ClassMean,
                other => return Err(Error::Config(format!("unknown method.scope '{other}'"))),
            },
        },
        "lpg_pgd" => PerturbMethod::LpgPgd {
            steps: get(map, "method.steps", DEFAULT_PGD_STEPS)?,
            step: match map
                .get("method.step")
                .map(String::as_str)
                .unwrap_or("bound_over_steps")
            {
                "bound_over_steps" => PgdStep::BoundOverSteps,
                v => PgdStep::Fixed(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad method.step '{v}'")))?,
                ),
            },
        },
        other => return Err(Error::Config(format!("unknown method.name '{other}'"))),
    };
    let split: SplitMode = get(map, "plan.split", SplitMode::Accuracy)?;
    let tau = match map.get("plan.tau") {
        Some(v) => v.parse::<Threshold>()?,
        None if split == SplitMode::Accuracy => Threshold::Value(0.5),
        None => Threshold::Median,
    };
    let train = TrainConfig {
        hidden,
        lr: get(map, "train.lr", d.lr)?,
        momentum: get(map, "train.momentum", d.momentum)?,
        weight_decay: get(map, "train.weight_decay", d.weight_decay)?,
        epochs: get(map, "train.epochs", d.epochs)?,
        batch_size: get(map, "train.batch_size", d.batch_size)?,
        lr_schedule: match map.get("train.lr_schedule") {
            Some(s) => parse_schedule(s)?,
            None => d.lr_schedule.clone(),
        },
        seed: get(map, "train.seed", d.seed)?,
        method,
        plan: PlanConfig {
            split,
            epsilon: get(map, "plan.eps", d.plan.epsilon)?,
            delta_epsilon: get(map, "plan.delta_eps", d.plan.delta_epsilon)?,
            tau,
        },
        ema_beta: get(map, "train.ema_beta", d.ema_beta)?,
        eval_every: get(map, "train.eval_every", d.eval_every)?,
        diagnostics: get(map, "train.diagnostics", d.diagnostics)?,
        check_directions: get(map, "train.check_directions", d.check_directions)?,
        wall_clock: get(map, "train.wall_clock", d.wall_clock)?,
    };
    train.validate()?;
    Ok(RunConfig {
        train_path: resolve_path(base, &required("data.train")?),
        test_path: resolve_path(base, &required("data.test")?),
        output_dir: resolve_path(base, &required("output.dir")?),
        train,
    })
}

/// Every key with its effective value, paths absolute where they were resolved.
pub fn resolved_settings(rc: &RunConfig, label: Option<&str>) -> BTreeMap<String, String> {
    let t = &rc.train;
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("data.train", rc.train_path.display().to_string());
    put("data.test", rc.test_path.display().to_string());
    put("output.dir", rc.output_dir.display().to_string());
    put(
        "model.hidden",
        if t.hidden.is_empty() {
            "none".into()
        } else {
            t.hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        },
    );
    put("train.lr", t.lr.to_string());
    put("train.momentum", t.momentum.to_string());
    put("train.weight_decay", t.weight_decay.to_string());
    put("train.epochs", t.epochs.to_string());
    put("train.batch_size", t.batch_size.to_string());
    put("train.lr_schedule", format_schedule(&t.lr_schedule));
    put("train.seed", t.seed.to_string());
    put("train.ema_beta", t.ema_beta.to_string());
    put("train.eval_every", t.eval_every.to_string());
    put("train.diagnostics", t.diagnostics.to_string());
    put("train.check_directions", t.check_directions.to_string());
    put("train.wall_clock", t.wall_clock.to_string());
    if let Some(l) = label {
        put("train.label", l.to_string());
    }
    put("method.name", t.method.name().to_string());
    match t.method {
        PerturbMethod::Clip { tau_clip } => put("method.tau_clip", tau_clip.to_string()),
        PerturbMethod::Noise { sigma } => put("method.sigma", sigma.to_string()),
        PerturbMethod::Sam { rho } => put("method.rho", rho.to_string()),
        PerturbMethod::LpgClosedForm { scope } => put(
            "method.scope",
            match scope {
                ClosedFormScope::PerSample => "per_sample".into(),
                ClosedFormScope::ClassMean => "class_mean".into(),
            },
        ),
        PerturbMethod::LpgPgd { steps, step } => {
            put("method.steps", steps.to_string());
            put(
                "method.step",
                match step {
                    PgdStep::BoundOverSteps => "bound_over_steps".into(),
                    PgdStep::Fixed(k) => k.to_string(),
                },
            );
        }
        PerturbMethod::NoPerturb => {}
    }
    put("plan.split", t.plan.split.as_str().to_string());
    put("plan.eps", t.plan.epsilon.to_string());
    put("plan.delta_eps", t.plan.delta_epsilon.to_string());
    put("plan.tau", t.plan.tau.to_string());
    m
}

// ---------------------------------------------------------------- train

pub const METRICS_FILE: &str = "metrics.csv";
pub const PLANS_FILE: &str = "plans.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

fn load_run_config(path: &Path) -> Result<(RunConfig, Option<String>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let map = if path.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest = serde_json::from_str(&text)?;
        if manifest.command != "train" {
            return Err(Error::Config(format!(
                "manifest records '{}', not a training run",
                manifest.command
            )));
        }
        manifest.config
    } else {
        parse_config_text(&text)?
    };
    let label = map.get("train.label").cloned();
    Ok((build_run_config(&map, base)?, label))
}

/// Train as configured and write metrics, plan sidecar, checkpoint and manifest.
/// Returns the exit code (3 on a numeric abort).
pub fn cmd_train(config_path: &Path) -> Result<i32> {
    let (rc, label) = load_run_config(config_path)?;
    for (what, p) in [("training", &rc.train_path), ("test", &rc.test_path)] {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "{what} dataset {} does not exist",
                p.display()
            )));
        }
    }
    let train_ds = Dataset::load(&rc.train_path)
        .map_err(|e| Error::Config(format!("{}: {e}", rc.train_path.display())))?;
    let test_ds = Dataset::load(&rc.test_path)
        .map_err(|e| Error::Config(format!("{}: {e}", rc.test_path.display())))?;
    let outcome = trainer::train(&rc.train, &train_ds, &test_ds)?;

    fs::create_dir_all(&rc.output_dir)?;
    let c = train_ds.num_classes();
    let out = |f: &str| rc.output_dir.join(f);
    fs::write(out(METRICS_FILE), trainer::metrics_csv(&outcome.history, c))?;
    fs::write(out(PLANS_FILE), trainer::plans_jsonl(&outcome.history)?)?;
    outcome.net.save_checkpoint(out(CHECKPOINT_FILE))?;
    let mut artifacts = BTreeMap::new();
    for (k, f) in [
        ("metrics", METRICS_FILE),
        ("plans", PLANS_FILE),
        ("checkpoint", CHECKPOINT_FILE),
        ("manifest", MANIFEST_FILE),
    ] {
        artifacts.insert(k.to_string(), out(f).display().to_string());
    }
    artifacts.insert("train".into(), rc.train_path.display().to_string());
    artifacts.insert("test".into(), rc.test_path.display().to_string());
    if let Some(abort) = &outcome.abort {
        artifacts.insert("abort".into(), abort.clone());
    }
    RunManifest {
        tool_version: TOOL_VERSION.into(),
        command: "train".into(),
        seed: rc.train.seed,
        config: resolved_settings(&rc, label.as_deref()),
        artifacts,
    }
    .save(&out(MANIFEST_FILE))?;
    match outcome.abort {
        Some(msg) => {
            eprintln!("training aborted: {msg}");
            Ok(EXIT_NUMERIC)
        }
        None => Ok(EXIT_OK),
    }
}

// ---------------------------------------------------------------- check

/// Run one suite or `all`, print the text report and optionally write
/// `<suite>.txt` and `<suite>.json` under `out`. Exit 0 iff everything passed.
pub fn cmd_check(suite: &str, seed: u64, out: Option<&Path>) -> Result<i32> {
    let names: Vec<&str> = if suite == "all" {
        analysis::SUITES.to_vec()
    } else if analysis::SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(Error::Config(format!(
            "unknown check suite '{suite}' (expected all, {})",
            analysis::SUITES.join(", ")
        )));
    };
    let reports: Vec<CheckReport> = names
        .iter()
        .map(|n| analysis::run_suite(n, seed))
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for r in &reports {
            fs::write(dir.join(format!("{}.txt", r.suite)), r.to_text())?;
            fs::write(
                dir.join(format!("{}.json", r.suite)),
                serde_json::to_string_pretty(r)? + "\n",
            )?;
        }
    }
    for r in &reports {
        print!("{}", r.to_text());
    }
    Ok(if reports.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

// ---------------------------------------------------------------- report

/// Final-row summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub method: String,
    pub seed: Option<u64>,
    pub dataset: String,
    pub epoch: usize,
    pub acc_overall: f64,
    pub acc_balanced: f64,
    pub acc_head: Option<f64>,
    pub acc_tail: Option<f64>,
    pub acc_noisy: Option<f64>,
    pub eps_bar: f64,
}

fn mean_over(acc: &[Option<f64>], classes: &[usize]) -> Option<f64> {
    let v: Vec<f64> = classes
        .iter()
        .filter_map(|&c| acc.get(c).copied().flatten())
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Head and tail classes: at or above / below the median class count.
pub fn head_tail(counts: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut c: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let med = median(&mut c).unwrap_or(0.0);
    let (mut head, mut tail) = (Vec::new(), Vec::new());
    for (k, &n) in counts.iter().enumerate() {
        if (n as f64) < med {
            tail.push(k);
        } else {
            head.push(k);
        }
    }
    (head, tail)
}

pub fn summarize_run(metrics_path: &Path) -> Result<RunSummary> {
    let rows = trainer::parse_metrics_csv(&fs::read_to_string(metrics_path)?)?;
    let last = rows.last().ok_or_else(|| {
        Error::parse(
            metrics_path.display().to_string(),
            "metrics file has no rows",
        )
    })?;
    let manifest_path = metrics_path.with_file_name(MANIFEST_FILE);
    let manifest = manifest_path
        .is_file()
        .then(|| RunManifest::load(&manifest_path))
        .transpose()?;
    let run = metrics_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| metrics_path.display().to_string());
    let present: Vec<f64> = last.acc_class.iter().flatten().copied().collect();
    let mut s = RunSummary {
        run,
        method: "unknown".into(),
        seed: None,
        dataset: String::new(),
        epoch: last.epoch,
        acc_overall: last.acc_overall,
        acc_balanced: present.iter().sum::<f64>() / present.len().max(1) as f64,
        acc_head: None,
        acc_tail: None,
        acc_noisy: None,
        eps_bar: last.eps_bar,
    };
    if let Some(m) = manifest {
        s.method = m
            .config
            .get("train.label")
            .or(m.config.get("method.name"))
            .cloned()
            .unwrap_or_default();
        s.seed = Some(m.seed);
        if let Some(train_path) = m.config.get("data.train") {
            s.dataset = train_path.clone();
            if let Ok(ds) = Dataset::load(train_path) {
                let (head, tail) = head_tail(ds.class_counts());
                s.acc_head = mean_over(&last.acc_class, &head);
                s.acc_tail = mean_over(&last.acc_class, &tail);
                let noisy = ds.noisy_classes();
                if ds.clean_labels().is_some() && !noisy.is_empty() {
                    s.acc_noisy = mean_over(&last.acc_class, &noisy);
                }
            }
        }
    }
    Ok(s)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn opt_csv(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Median over seeds of `acc_overall(method) − acc_overall(none)`, pairing
/// runs on the same dataset and seed.
pub fn median_deltas(runs: &[RunSummary]) -> Vec<(String, usize, f64)> {
    let mut methods: Vec<&str> = runs
        .iter()
        .map(|r| r.method.as_str())
        .filter(|m| *m != "none")
        .collect();
    methods.sort_unstable();
    methods.dedup();
    let mut out = Vec::new();
    for m in methods {
        let mut deltas: Vec<f64> = runs
            .iter()
            .filter(|r| r.method == m)
            .filter_map(|r| {
                runs.iter()
                    .find(|b| b.method == "none" && b.seed == r.seed && b.dataset == r.dataset)
                    .map(|b| r.acc_overall - b.acc_overall)
            })
            .collect();
        let n = deltas.len();
        if let Some(med) = median(&mut deltas) {
            out.push((m.to_string(), n, med));
        }
    }
    out
}

/// Build the comparison table; writes CSV to `csv` if given and returns the text.
pub fn cmd_report(metrics: &[PathBuf], csv: Option<&Path>) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::Config(
            "report needs at least one metrics file".into(),
        ));
    }
    let runs: Vec<RunSummary> = metrics
        .iter()
        .map(|p| summarize_run(p))
        .collect::<Result<_>>()?;
    let mut text = format!(
        "{:<20} {:<16} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}  dataset\n",
        "run", "method", "seed", "epoch", "overall", "balanced", "head", "tail", "noisy", "eps_bar"
    );
    let mut table = String::from(
        "run,method,seed,dataset,epoch,acc_overall,acc_balanced,acc_head,acc_tail,acc_noisy,eps_bar\n",
    );
    for r in &runs {
        writeln!(
            text,
            "{:<20} {:<16} {:>5} {:>6} {:>8.4} {:>8.4} {:>8} {:>8} {:>8} {:>8.4}  {}",
            r.run,
            r.method,
            r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            r.epoch,
            r.acc_overall,
            r.acc_balanced,
            opt(r.acc_head),
            opt(r.acc_tail),
            opt(r.acc_noisy),
            r.eps_bar,
            r.dataset
        )
        .unwrap();
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.run,
            r.method,
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.dataset,
            r.epoch,
            r.acc_overall,
            r.acc_balanced,
            opt_csv(r.acc_head),
            opt_csv(r.acc_tail),
            opt_csv(r.acc_noisy),
            r.eps_bar
        )
        .unwrap();
    }
    let deltas = median_deltas(&runs);
    if !deltas.is_empty() {
        text.push_str("\nmedian delta vs none (overall accuracy)\n");
        table.push_str("\nmethod,pairs,median_delta_acc_overall\n");
        for (m, n, d) in &deltas {
            writeln!(text, "  {m:<16} pairs {n:>3}  median delta {d:+.4}").unwrap();
            writeln!(table, "{m},{n},{d}").unwrap();
        }
    }
    if let Some(path) = csv {
        fs::write(path, table)?;
    }
    Ok(text)
}

// ---------------------------------------------------------------- replay

/// Re-execute the command recorded in a manifest.
pub fn cmd_replay(manifest_path: &Path) -> Result<i32> {
    let m = RunManifest::load(manifest_path)?;
    if m.tool_version != TOOL_VERSION {
        log::warn!(
            "manifest written by version {}, running {}",
            m.tool_version,
            TOOL_VERSION
        );
    }
    match m.command.as_str() {
        "gen-data" => cmd_gen_data(&gen_data_from_settings(&m.config)?).map(|_| EXIT_OK),
        "train" => cmd_train(manifest_path),
        other => Err(Error::Config(format!("cannot replay command '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_rejects_unknown_and_duplicate_keys() {
        assert!(matches!(
            parse_config_text("train.lrr = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config_text("train.lr = 1\ntrain.lr = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config_text("just words"),
            Err(Error::Parse { .. })
        ));
        let m = parse_config_text("# comment\n\ntrain.lr = 0.1  # trailing\n").unwrap();
        assert_eq!(m["train.lr"], "0.1");
    }

    #[test]
    fn defaults_and_round_trip() {
        let text = "data.train = a.csv\ndata.test = b.csv\noutput.dir = out\nmethod.name = lpg_pgd\nplan.split = frequency\n";
        let rc = build_run_config(&parse_config_text(text).unwrap(), Path::new("/base")).unwrap();
        assert_eq!(rc.train_path, PathBuf::from("/base/a.csv"));
        assert_eq!(rc.train.plan.tau, Threshold::Median);
        assert_eq!(rc.train.lr_schedule, vec![(30, 0.1), (45, 0.1)]);
        assert_eq!(
            rc.train.method,
            PerturbMethod::LpgPgd {
                steps: 3,
                step: PgdStep::BoundOverSteps
            }
        );
        let settings = resolved_settings(&rc, None);
        let again = build_run_config(&settings, Path::new("/elsewhere")).unwrap();
        assert_eq!(again, rc);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let base = "data.train = a\ndata.test = b\noutput.dir = o\n";
        for extra in [
            "train.lr = -1",
            "method.name = adam",
            "plan.split = random",
            "train.lr_schedule = 5:0.1,3:0.1",
        ] {
            let m = parse_config_text(&format!("{base}{extra}\n")).unwrap();
            assert!(
                matches!(build_run_config(&m, Path::new(".")), Err(Error::Config(_))),
                "{extra}"
            );
        }
        let m = parse_config_text("data.train = a\n").unwrap();
        assert!(build_run_config(&m, Path::new(".")).is_err());
    }

    #[test]
    fn gen_data_settings_round_trip() {
        let args = GenDataArgs {
            scenario: Scenario::Noisy,
            classes: 4,
            dim: 5,
            per_class: 10,
            separation: 2.5,
            ratio: 10.0,
            rate: 0.2,
            noisy_classes: Some(vec![0, 2]),
            seed: 3,
            out: PathBuf::from("x.csv"),
            test_out: None,
            test_per_class: 7,
        };
        let s = gen_data_settings(&args).unwrap();
        assert_eq!(gen_data_from_settings(&s).unwrap(), args);
    }

    #[test]
    fn head_tail_split_and_median_deltas() {
        let (head, tail) = head_tail(&[100, 50, 20, 5]);
        assert_eq!(head, vec![0, 1]);
        assert_eq!(tail, vec![2, 3]);
        let run = |m: &str, seed, acc| RunSummary {
            run: String::new(),
            method: m.into(),
            seed: Some(seed),
            dataset: "d".into(),
            epoch: 1,
            acc_overall: acc,
            acc_balanced: acc,
            acc_head: None,
            acc_tail: None,
            acc_noisy: None,
            eps_bar: 0.0,
        };
        let runs = vec![
            run("none", 1, 0.5),
            run("none", 2, 0.6),
            run("none", 3, 0.7),
            run("lpg", 1, 0.55),
            run("lpg", 2, 0.58),
            run("lpg", 3, 0.8),
        ];
        let d = median_deltas(&runs);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].1, 3);
        assert!((d[0].2 - 0.05).abs() < 1e-12);
    }
}
