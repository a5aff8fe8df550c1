//! Run configuration: one TOML document with a section per module.
//!
//! Values are resolved in order: built-in defaults, the `--config` file,
//! `--set key=value` overrides, then dedicated flags. Unknown keys are
//! rejected at every layer.

use std::fmt::Write as _;
use std::path::Path;

use crowdmf::analysis::{Kurtosis, DEFAULT_HAC_LAGS};
use crowdmf::eval::{Eligibility, EvalConfig, Method, Weekday};
use crowdmf::mf::{FilterThresholds, FitConfig, Init, Regularization};
use crowdmf::model::{DuplicatePolicy, ValueSource};
use crowdmf::sim::{SimConfig, StreamConfig};
use crowdmf::theory::{Scenario, TheoryConfig};
use crowdmf::twostage::TwoStageConfig;
use crowdmf::Execution;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub sim: SimConfig,
    pub stream: StreamSection,
    pub fit: FitSection,
    pub filter: FilterSection,
    pub twostage: TwoStageConfig,
    pub eval: EvalSection,
    pub theory: TheoryConfig,
    pub suite: SuiteSection,
    pub analyze: AnalyzeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub execution: Execution,
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, execution: Execution::Parallel, deterministic: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub enabled: bool,
    pub weeks: usize,
    pub notes_per_week: usize,
    pub age_decay: f64,
    pub start_ms: i64,
}

impl Default for StreamSection {
    fn default() -> Self {
        let s = StreamConfig::default();
        Self {
            enabled: false,
            weeks: s.weeks,
            notes_per_week: s.notes_per_week,
            age_decay: s.age_decay,
            start_ms: s.start_ms,
        }
    }
}

impl StreamSection {
    pub fn to_stream(&self) -> StreamConfig {
        StreamConfig {
            weeks: self.weeks,
            notes_per_week: self.notes_per_week,
            age_decay: self.age_decay,
            start_ms: self.start_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Uniform ridge penalty; unset uses `0.03·|Ω|/(U+N)` on the data fitted.
    pub lambda: Option<f64>,
    pub max_sweeps: usize,
    pub rel_tol: f64,
    pub init_scale: f64,
    pub value_source: ValueSource,
    pub duplicate_policy: DuplicatePolicy,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            lambda: None,
            max_sweeps: f.max_sweeps,
            rel_tol: f.rel_tol,
            init_scale: Init::DEFAULT_SCALE,
            value_source: ValueSource::Rating,
            duplicate_policy: DuplicatePolicy::KeepLatest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub enabled: bool,
    pub min_ratings_per_note: usize,
    pub min_notes_per_rater: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        let t = FilterThresholds::default();
        Self {
            enabled: true,
            min_ratings_per_note: t.min_ratings_per_note,
            min_notes_per_rater: t.min_notes_per_rater,
        }
    }
}

impl FilterSection {
    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            min_ratings_per_note: self.min_ratings_per_note,
            min_notes_per_rater: self.min_notes_per_rater,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub warm_weeks: usize,
    pub methods: Vec<Method>,
    pub eligibility: Eligibility,
    pub week_anchor: Weekday,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            warm_weeks: EvalConfig::default().warm_weeks,
            methods: vec![Method::Baseline, Method::TwoStage],
            eligibility: Eligibility::FittedAtWeek,
            week_anchor: Weekday::Monday,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub scenarios: Vec<Scenario>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self { scenarios: Scenario::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Eval metric whose weekly baseline-minus-two-stage gap is analysed.
    pub metric: String,
    /// First post week (calendar week index); unset splits the weeks in half.
    pub post_from_week: Option<i64>,
    pub hac_lags: usize,
    pub n_perm: usize,
    pub kurtosis: Kurtosis,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            metric: "oos_mar".into(),
            post_from_week: None,
            hac_lags: DEFAULT_HAC_LAGS,
            n_perm: 1000,
            kurtosis: Kurtosis::Raw,
        }
    }
}

impl RunConfig {
    pub fn execution(&self) -> Execution {
        self.run.execution
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig { seed: self.run.seed, ..self.sim.clone() }
    }

    pub fn theory_config(&self) -> TheoryConfig {
        TheoryConfig { seed: self.run.seed, ..self.theory.clone() }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            regularization: self.fit.lambda.map(Regularization::uniform),
            max_sweeps: self.fit.max_sweeps,
            rel_tol: self.fit.rel_tol,
            seed: self.run.seed,
            init: Init::Random { scale: self.fit.init_scale },
            deterministic: self.run.deterministic,
            execution: self.run.execution,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fit: self.fit_config(),
            two_stage: self.twostage.clone(),
            filter: if self.filter.enabled {
                self.filter.thresholds()
            } else {
                FilterThresholds { min_ratings_per_note: 1, min_notes_per_rater: 1 }
            },
            warm_weeks: self.eval.warm_weeks,
            value_source: self.fit.value_source,
            duplicate_policy: self.fit.duplicate_policy,
            eligibility: self.eval.eligibility,
        }
    }

    /// Builds the configuration from an optional file plus `key=value`
    /// overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        Self::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

/// Parses `section.key=value`; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_path(table, key, value)
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("config key {key:?} must look like section.key")));
    }
    let section = table
        .entry(parts[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section) = section else {
        return Err(CliError::Usage(format!("config section {:?} is not a table", parts[0])));
    };
    section.insert(parts[1].to_string(), value);
    Ok(())
}

/// Every accepted key with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "top-level seed for every random draw"),
    ("run.execution", "parallel | sequential"),
    ("run.deterministic", "fixed summation order in the solver"),
    ("sim.U", "number of raters"),
    ("sim.N", "number of notes"),
    ("sim.p", "probability that a rater rates a note"),
    ("sim.mu", "global intercept"),
    ("sim.mu_f", "mean rater factor c (> 0)"),
    ("sim.dist_h", "rater intercept law: {kind = point|uniform|trunc_normal, ...}"),
    ("sim.dist_i", "note intercept law"),
    ("sim.dist_f", "law of the centred rater factor"),
    ("sim.dist_g", "note factor law"),
    ("sim.sigma_eps", "rater noise: {kind = constant, sigma} | two_group | per_user"),
    ("sim.controversy", "law of the note controversy c_n in [0, 1]"),
    ("sim.rho_fn", "weight on the private signal: {kind = linear, kappa} | step"),
    ("sim.consensus", "law of the anticipated consensus m_n"),
    ("sim.sigma_m", "forecast noise {base, slope}"),
    ("sim.noise_after_mixing", "add rater noise after mixing with the consensus"),
    ("sim.discretize", "emit three-level ratings as the fitted value"),
    ("stream.enabled", "spread ratings over weekly timestamps"),
    ("stream.weeks", "weeks in the stream"),
    ("stream.notes_per_week", "notes created per week"),
    ("stream.age_decay", "rating probability ratio between consecutive weeks of age"),
    ("stream.start_ms", "first week start, Unix milliseconds"),
    ("fit.lambda", "uniform ridge penalty (unset: 0.03·|ratings|/(U+N))"),
    ("fit.max_sweeps", "maximum coordinate-descent sweeps"),
    ("fit.rel_tol", "relative objective change that stops the solver"),
    ("fit.init_scale", "half-width of the uniform factor initialisation"),
    ("fit.value_source", "rating | latent (latentReport column)"),
    ("fit.duplicate_policy", "keep_latest | keep_earliest for repeated (rater, note) pairs"),
    ("filter.enabled", "apply the activity filter before fitting"),
    ("filter.min_ratings_per_note", "notes with fewer ratings are dropped"),
    ("filter.min_notes_per_rater", "raters with fewer ratings are dropped"),
    ("twostage.variance", "mean_square | sample_variance"),
    ("twostage.floor", "variance floor; weights are at most 1/floor"),
    ("twostage.max_reweight_rounds", "weighted refits"),
    ("twostage.reweight_tol", "stop reweighting below this relative weight change"),
    ("twostage.normalize_weights", "rescale weights to mean 1 inside the refit"),
    ("eval.warm_weeks", "weeks in the initial warm fit"),
    ("eval.methods", "subset of [\"baseline\", \"two_stage\"]"),
    ("eval.eligibility", "fitted_at_week | rated_during_week"),
    ("eval.week_anchor", "first day of a week, monday .. sunday (00:00 UTC)"),
    ("theory.seeds", "seeds averaged in the truthful and known-g rows"),
    ("theory.truthful_size", "U = N for the truthful rows"),
    ("theory.truthful_small", "smaller size in the size comparison"),
    ("theory.truthful_large", "larger size in the size comparison"),
    ("theory.truthful_p", "rating probability in the truthful rows"),
    ("theory.truthful_sigma", "rater noise in the truthful rows"),
    ("theory.conformity_size", "U = N for the conformity rows"),
    ("theory.conformity_sigma", "rater noise in the conformity rows"),
    ("theory.kappa", "slope of rho(c) = 1 - kappa c"),
    ("theory.clamp_size", "U = N for the clamped-g rows"),
    ("theory.clamp_lambda", "ridge penalty in the clamped-g fits"),
    ("theory.share_users", "raters in the minority-share rows"),
    ("theory.share_notes", "notes in the minority-share rows"),
    ("theory.kappa_grid", "kappa values for the minority-share rows"),
    ("theory.hetero_size", "U = N for the heteroskedastic rows"),
    ("theory.hetero_replicates", "Monte Carlo replicates"),
    ("theory.sigma_lo", "low rater noise"),
    ("theory.sigma_hi", "high rater noise"),
    ("theory.tol_abs", "absolute tolerance"),
    ("theory.tol_share", "tolerance for minority shares"),
    ("theory.tol_rel", "relative tolerance for variances"),
    ("theory.wrong_formula", "self-test: use a wrong slope so the suite must fail"),
    ("suite.scenarios", "subset of [\"truthful\", \"conformity\", \"known_g\", \"heteroskedastic\"]"),
    ("analyze.metric", "in_sample_mse | oos_mse | oos_mar | oos_medar"),
    ("analyze.post_from_week", "first post week index (unset: second half)"),
    ("analyze.hac_lags", "Newey-West lag"),
    ("analyze.n_perm", "permutations (>= 100)"),
    ("analyze.kurtosis", "raw | sample_corrected"),
];

/// Leaf keys of the default configuration, `section.key`.
pub fn default_keys() -> Vec<(String, toml::Value)> {
    let v = toml::Value::try_from(RunConfig::default()).expect("default config serialises");
    let mut out = Vec::new();
    if let toml::Value::Table(t) = v {
        for (section, body) in t {
            if let toml::Value::Table(body) = body {
                for (k, v) in body {
                    out.push((format!("{section}.{k}"), v));
                }
            }
        }
    }
    out
}

pub fn keys_help() -> String {
    let defaults = default_keys();
    let mut s = String::from("Config keys (set in a --config TOML file or with --set section.key=value):\n");
    for (key, what) in KEYS {
        let default = defaults
            .iter()
            .find(|(k, _)| k == key)
            .map_or_else(|| "unset".to_string(), |(_, v)| v.to_string());
        let _ = writeln!(s, "  {key:<30} {what} [default: {default}]");
    }
    s.push_str("\nEnvironment: CROWDMF_DATA_DIR sets the default data directory (default ./crowdmf-data).\n");
    s.push_str("Exit codes: 0 success, 1 usage, 2 data error, 3 acceptance failure.\n");
    s
}
