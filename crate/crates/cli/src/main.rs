//! `crowdmf`: simulate crowd ratings, fit the factor model, evaluate and
//! check the large-sample predictions from one binary.

mod commands;
mod config;
mod error;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::commands::{OutDir, Outcome, EVAL, PARAMS, RATINGS};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{sha256_file, FileRecord, Manifest, MANIFEST_FILE};

pub const DATA_DIR_ENV: &str = "CROWDMF_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "crowdmf-data";

#[derive(Parser, Debug)]
#[command(name = "crowdmf", version, about = "Rank-1 factor models for crowd ratings")]
struct Cli {
    /// Worker threads for data-parallel steps (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (default: $CROWDMF_DATA_DIR/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,

    /// Top-level seed, same as `--set run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ratings file and its truth sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of raters.
        #[arg(long = "U")]
        users: Option<usize>,
        /// Number of notes.
        #[arg(long = "N")]
        notes: Option<usize>,
        /// Rating probability.
        #[arg(long)]
        p: Option<f64>,
        /// Spread ratings over weekly timestamps.
        #[arg(long)]
        stream: bool,
    },
    /// Fit the factor model to a ratings file.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Ratings TSV (default: $CROWDMF_DATA_DIR/simulate/ratings.tsv).
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Fit, estimate per-rater noise, and refit with inverse-variance weights.
    Twostage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Weekly rolling fits with one-week-ahead errors.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Same as `--set eval.warm_weeks=N`.
        #[arg(long)]
        warm_weeks: Option<usize>,
    },
    /// Compare fits on simulated data with their predicted limits.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Scenario to run (repeatable; default all).
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        /// Use a deliberately wrong prediction; the run must then fail.
        #[arg(long)]
        self_test: bool,
    },
    /// Statistics tables from eval, parameter and ratings files.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Weekly eval table written by `evaluate`.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Parameter file written by `fit` or `twostage`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Ratings TSV for the rater-by-week panel (needs --params).
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Repeat a run from its manifest and verify the output hashes.
    Replay {
        /// manifest.json written by an earlier run.
        manifest: PathBuf,
        /// Write into this directory instead of the original one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from)
}

/// A fully resolved run: what to do, with which configuration, on which files.
struct Plan {
    subcommand: &'static str,
    config_file: Option<PathBuf>,
    config: RunConfig,
    inputs: BTreeMap<String, PathBuf>,
    out: PathBuf,
    force: bool,
}

fn resolve(common: &Common, subcommand: &'static str, mut flags: Vec<String>) -> Result<Plan, CliError> {
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        flags.push(format!("run.seed={s}"));
    }
    overrides.extend(flags);
    let config = RunConfig::load(common.config.as_deref(), &overrides)?;
    Ok(Plan {
        subcommand,
        config_file: common.config.clone(),
        config,
        inputs: BTreeMap::new(),
        out: common.out.clone().unwrap_or_else(|| data_dir().join(subcommand)),
        force: common.force,
    })
}

fn default_ratings(given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| data_dir().join("simulate").join("ratings.tsv"))
}

fn plan(command: Command) -> Result<Plan, CliError> {
    Ok(match command {
        Command::Simulate { common, users, notes, p, stream } => {
            let mut flags = Vec::new();
            if let Some(u) = users {
                flags.push(format!("sim.U={u}"));
            }
            if let Some(n) = notes {
                flags.push(format!("sim.N={n}"));
            }
            if let Some(p) = p {
                flags.push(format!("sim.p={p:?}"));
            }
            if stream {
                flags.push("stream.enabled=true".into());
            }
            resolve(&common, "simulate", flags)?
        }
        Command::Fit { common, ratings } => {
            let mut plan = resolve(&common, "fit", Vec::new())?;
            plan.inputs.insert(RATINGS.into(), default_ratings(ratings));
            plan
        }
        Command::Twostage { common, ratings } => {
            let mut plan = resolve(&common, "twostage", Vec::new())?;
            plan.inputs.insert(RATINGS.into(), default_ratings(ratings));
            plan
        }
        Command::Evaluate { common, ratings, warm_weeks } => {
            let flags = warm_weeks.map(|w| format!("eval.warm_weeks={w}")).into_iter().collect();
            let mut plan = resolve(&common, "evaluate", flags)?;
            plan.inputs.insert(RATINGS.into(), default_ratings(ratings));
            plan
        }
        Command::Theory { common, scenarios, self_test } => {
            let mut flags = Vec::new();
            if !scenarios.is_empty() {
                let quoted: Vec<String> = scenarios.iter().map(|s| format!("{s:?}")).collect();
                flags.push(format!("suite.scenarios=[{}]", quoted.join(", ")));
            }
            if self_test {
                flags.push("theory.wrong_formula=true".into());
            }
            resolve(&common, "theory", flags)?
        }
        Command::Analyze { common, eval, params, ratings } => {
            let mut plan = resolve(&common, "analyze", Vec::new())?;
            for (k, v) in [(EVAL, eval), (PARAMS, params), (RATINGS, ratings)] {
                if let Some(v) = v {
                    plan.inputs.insert(k.into(), v);
                }
            }
            if plan.inputs.is_empty() {
                let fallback = data_dir().join("evaluate").join("eval_weeks.tsv");
                if fallback.exists() {
                    plan.inputs.insert(EVAL.into(), fallback);
                }
            }
            plan
        }
        Command::Replay { .. } => unreachable!("replay is handled before planning"),
    })
}

fn execute(plan: &Plan) -> Result<(Outcome, Manifest), CliError> {
    for (k, p) in &plan.inputs {
        if !p.exists() {
            return Err(CliError::Data(format!("--{k} input {} does not exist", p.display())));
        }
    }
    let mut out = OutDir::new(plan.out.clone(), plan.force)?;
    out.check(&["summary.txt", MANIFEST_FILE])?;
    let cfg = &plan.config;
    let outcome = match plan.subcommand {
        "simulate" => commands::simulate(cfg, &mut out)?,
        "fit" => commands::fit(cfg, &plan.inputs, &mut out)?,
        "twostage" => commands::twostage(cfg, &plan.inputs, &mut out)?,
        "evaluate" => commands::evaluate(cfg, &plan.inputs, &mut out)?,
        "theory" => commands::theory(cfg, &mut out)?,
        "analyze" => commands::analyze(cfg, &plan.inputs, &mut out)?,
        other => return Err(CliError::Usage(format!("unknown subcommand {other}"))),
    };
    out.write_text("summary.txt", &outcome.summary)?;
    let mut inputs = BTreeMap::new();
    for (k, p) in &plan.inputs {
        inputs.insert(k.clone(), FileRecord { path: path_string(p), sha256: sha256_file(p)? });
    }
    let mut outputs = BTreeMap::new();
    for name in &out.written {
        outputs.insert(name.clone(), sha256_file(&out.dir.join(name))?);
    }
    let manifest = Manifest {
        tool: format!("crowdmf {}", env!("CARGO_PKG_VERSION")),
        subcommand: plan.subcommand.to_string(),
        config_file: plan.config_file.as_deref().map(path_string),
        seed: cfg.run.seed,
        config: serde_json::to_value(cfg).expect("config serialises"),
        inputs,
        out_dir: path_string(&plan.out),
        outputs,
    };
    manifest.write(&out.dir)?;
    Ok((outcome, manifest))
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let m = Manifest::read(manifest_path)?;
    let subcommand = ["simulate", "fit", "twostage", "evaluate", "theory", "analyze"]
        .into_iter()
        .find(|s| *s == m.subcommand)
        .ok_or_else(|| CliError::Usage(format!("manifest names unknown subcommand {:?}", m.subcommand)))?;
    for (k, r) in &m.inputs {
        let h = sha256_file(Path::new(&r.path))?;
        if h != r.sha256 {
            return Err(CliError::Data(format!("input {k} ({}) changed since the recorded run", r.path)));
        }
    }
    let plan = Plan {
        subcommand,
        config_file: m.config_file.as_ref().map(PathBuf::from),
        config: m.config()?,
        inputs: m.input_paths(),
        out: out.unwrap_or_else(|| PathBuf::from(&m.out_dir)),
        force: true,
    };
    let (outcome, fresh) = execute(&plan)?;
    print!("{}", outcome.summary);
    let mut mismatched = Vec::new();
    for (name, hash) in &m.outputs {
        if fresh.outputs.get(name) != Some(hash) {
            mismatched.push(name.as_str());
        }
    }
    if fresh.outputs.len() != m.outputs.len() {
        mismatched.push("(output set)");
    }
    if !mismatched.is_empty() {
        return Err(CliError::Acceptance(format!("replay outputs differ: {}", mismatched.join(", "))));
    }
    println!("replay reproduced {} outputs byte for byte", m.outputs.len());
    if let Some(f) = outcome.failure {
        return Err(CliError::Acceptance(f));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    if let Command::Replay { manifest, out } = cli.command {
        return replay(&manifest, out);
    }
    let plan = plan(cli.command)?;
    let (outcome, manifest) = execute(&plan)?;
    print!("{}", outcome.summary);
    println!("wrote {} files and {MANIFEST_FILE} to {}", manifest.outputs.len(), plan.out.display());
    match outcome.failure {
        Some(f) => Err(CliError::Acceptance(f)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let keys = config::keys_help();
    let short = "Run with --help (not -h) to list every config key.";
    let mut cmd = Cli::command().after_long_help(keys.clone()).after_help(short);
    for name in ["simulate", "fit", "twostage", "evaluate", "theory", "analyze"] {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_long_help(keys).after_help(short));
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crowdmf: {e}");
            e.exit_code()
        }
    }
}
