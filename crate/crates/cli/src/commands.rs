//! Subcommand bodies. Each reads its inputs, writes its outputs through an
//! [`OutDir`] and returns a human summary.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crowdmf::analysis::{
    bimodality_coefficient_with, difference_in_means, jeffreys_proportion, permutation_test, spearman,
    two_way_fe_did, weekly_gap_did, Estimate, PanelCell,
};
use crowdmf::eval::{compare_methods, rolling_evaluate, weekly_split, Method, Metric};
use crowdmf::io::{self, ParamSnapshot};
use crowdmf::mf::{self, filter_observations};
use crowdmf::model::{classify_note, NoteStatus, ObservationSet};
use crowdmf::sim::{self, note_id, user_id};
use crowdmf::theory::run_theory_suite;
use crowdmf::twostage::two_stage_fit;

use crate::config::RunConfig;
use crate::error::CliError;

pub const RATINGS: &str = "ratings";
pub const PARAMS: &str = "params";
pub const EVAL: &str = "eval";

/// Output directory that refuses to overwrite unless forced and remembers
/// what was written.
pub struct OutDir {
    pub dir: PathBuf,
    force: bool,
    pub written: Vec<String>,
}

impl OutDir {
    pub fn new(dir: PathBuf, force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, force, written: Vec::new() })
    }

    /// Fails when any of `names` already exists and `--force` was not given.
    pub fn check(&self, names: &[&str]) -> Result<(), CliError> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.dir.join(n);
            if p.exists() {
                return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
        Ok(())
    }

    pub fn write<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> crowdmf::Result<()>,
    {
        self.check(&[name])?;
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write(name, |w| Ok(w.write_all(text.as_bytes())?))
    }
}

pub struct Outcome {
    pub summary: String,
    /// Set when a check failed; the run still writes all its outputs.
    pub failure: Option<String>,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, failure: None }
    }
}

fn input<'a>(inputs: &'a BTreeMap<String, PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    inputs
        .get(key)
        .map(PathBuf::as_path)
        .ok_or_else(|| CliError::Usage(format!("missing --{key} input")))
}

fn load_observations(cfg: &RunConfig, path: &Path) -> Result<(ObservationSet, usize, usize), CliError> {
    let ing = io::ingest_ratings_tsv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let all = ObservationSet::from_events(&ing.events, cfg.fit.duplicate_policy, cfg.fit.value_source)?;
    let total = all.len();
    let obs = if cfg.filter.enabled { filter_observations(&all, cfg.filter.thresholds()) } else { all };
    if obs.is_empty() {
        return Err(CliError::Data(if cfg.filter.enabled && total > 0 {
            format!(
                "the activity filter removed all {total} ratings (filter.min_ratings_per_note = {}, \
                 filter.min_notes_per_rater = {})",
                cfg.filter.min_ratings_per_note, cfg.filter.min_notes_per_rater
            )
        } else {
            format!("{} holds no usable ratings", path.display())
        }));
    }
    Ok((obs, total, ing.skipped))
}

fn snapshot(params: crowdmf::LatentParams, obs: &ObservationSet) -> Result<ParamSnapshot, CliError> {
    Ok(ParamSnapshot::new(params, obs.user_ids().to_vec(), obs.note_ids().to_vec())?)
}

fn status_counts(p: &crowdmf::LatentParams) -> [usize; 3] {
    let mut c = [0; 3];
    for &i in &p.i {
        c[match classify_note(i) {
            NoteStatus::Helpful => 0,
            NoteStatus::NeedsMoreRatings => 1,
            NoteStatus::NotHelpful => 2,
        }] += 1;
    }
    c
}

pub fn simulate(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    out.check(&["ratings.tsv", "truth.tsv"])?;
    let sc = cfg.sim_config();
    let ds = if cfg.stream.enabled {
        sim::generate_stream(&sc, &cfg.stream.to_stream(), cfg.execution())?
    } else {
        sim::generate_dataset_with(&sc, cfg.execution())?
    };
    out.write("ratings.tsv", |w| io::write_ratings(w, &ds.events))?;
    let users: Vec<String> = (0..sc.num_users).map(user_id).collect();
    let notes: Vec<String> = (0..sc.num_notes).map(note_id).collect();
    out.write("truth.tsv", |w| io::write_truth(w, &ds.truth, &users, &notes))?;
    let mut s = String::new();
    let _ = writeln!(s, "simulated {} ratings from {} raters on {} notes", ds.events.len(), sc.num_users, sc.num_notes);
    let _ = writeln!(s, "seed {}, value source {:?}", sc.seed, sc.value_source());
    Ok(Outcome::ok(s))
}

pub fn fit(cfg: &RunConfig, inputs: &BTreeMap<String, PathBuf>, out: &mut OutDir) -> Result<Outcome, CliError> {
    out.check(&["params.tsv"])?;
    let (obs, total, skipped) = load_observations(cfg, input(inputs, RATINGS)?)?;
    let res = mf::fit(&obs, &cfg.fit_config(), None)?;
    let snap = snapshot(res.params, &obs)?;
    out.write("params.tsv", |w| io::write_params(w, &snap))?;
    let [helpful, nmr, not_helpful] = status_counts(&snap.params);
    let mut s = String::new();
    let _ = writeln!(s, "ratings read {total}, skipped {skipped}, fitted {}", obs.len());
    let _ = writeln!(s, "raters {}, notes {}", obs.num_users(), obs.num_notes());
    let _ = writeln!(s, "objective {:.6e}, sweeps {}, converged {}", res.objective, res.sweeps, res.converged);
    let _ = writeln!(s, "mu {:.6}", snap.params.mu);
    let _ = writeln!(s, "notes helpful {helpful}, needs more ratings {nmr}, not helpful {not_helpful}");
    Ok(Outcome::ok(s))
}

pub fn twostage(cfg: &RunConfig, inputs: &BTreeMap<String, PathBuf>, out: &mut OutDir) -> Result<Outcome, CliError> {
    out.check(&["params.tsv", "stage1_params.tsv", "weights.tsv"])?;
    let (obs, total, skipped) = load_observations(cfg, input(inputs, RATINGS)?)?;
    let ts = two_stage_fit(&obs, &cfg.fit_config(), &cfg.twostage)?;
    let fitted = &ts.observations;
    let second = snapshot(ts.second.params.clone(), fitted)?;
    let first = snapshot(ts.stage1.params.clone(), fitted)?;
    out.write("params.tsv", |w| io::write_params(w, &second))?;
    out.write("stage1_params.tsv", |w| io::write_params(w, &first))?;
    out.write("weights.tsv", |w| {
        io::write_weights(w, fitted.user_ids(), &ts.variance.sigma2, ts.weights.as_slice())
    })?;
    let w = ts.weights.as_slice();
    let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mut s = String::new();
    let _ = writeln!(s, "ratings read {total}, skipped {skipped}, fitted {}", fitted.len());
    let _ = writeln!(s, "raters {}, notes {}", fitted.num_users(), fitted.num_notes());
    let _ = writeln!(s, "stage 1 objective {:.6e}, sweeps {}", ts.stage1.objective, ts.stage1.sweeps);
    let _ = writeln!(s, "weighted objective {:.6e}, sweeps {}, rounds {}", ts.second.objective, ts.second.sweeps, ts.rounds);
    let _ = writeln!(s, "weights min {lo:.6e}, max {hi:.6e}");
    for warning in &ts.warnings {
        let _ = writeln!(s, "warning: {warning}");
    }
    Ok(Outcome::ok(s))
}

pub fn evaluate(cfg: &RunConfig, inputs: &BTreeMap<String, PathBuf>, out: &mut OutDir) -> Result<Outcome, CliError> {
    let methods = &cfg.eval.methods;
    let both = methods.contains(&Method::Baseline) && methods.contains(&Method::TwoStage);
    let mut planned = vec!["eval_weeks.tsv", "eval_summary.tsv"];
    if both {
        planned.push("comparison.tsv");
    }
    out.check(&planned)?;
    let path = input(inputs, RATINGS)?;
    let ing = io::ingest_ratings_tsv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let stream = weekly_split(&ing.events, cfg.eval.week_anchor);
    let report = rolling_evaluate(&stream, methods, &cfg.eval_config())?;
    out.write("eval_weeks.tsv", |w| io::write_eval_weeks(w, &report.weeks))?;
    out.write("eval_summary.tsv", |w| io::write_eval_summary(w, &report.aggregates))?;
    let mut s = String::new();
    let _ = writeln!(s, "weeks {}, scored {}, warm {}", stream.len(), report.weeks.len(), cfg.eval.warm_weeks);
    for a in &report.aggregates {
        let _ = writeln!(s, "{:<10} {:<14} mean {} over {} weeks", a.method.as_str(), a.metric.as_str(), fmt_opt(a.mean), a.weeks);
    }
    if both {
        let cmp = compare_methods(&report)?;
        out.write("comparison.tsv", |w| io::write_comparison(w, &cmp))?;
        for m in Metric::ALL {
            let _ = writeln!(
                s,
                "improvement {:<14} {}% (two-stage lower in {} of weeks)",
                m.as_str(),
                cmp.average(m).map_or_else(|| "n/a".into(), |v| format!("{v:.2}")),
                cmp.wins(m).map_or_else(|| "n/a".into(), |v| format!("{:.0}%", 100.0 * v)),
            );
        }
    }
    for (m, snap) in &report.final_params {
        let name = format!("params_{}.tsv", m.as_str());
        out.write(&name, |w| io::write_params(w, snap))?;
    }
    Ok(Outcome::ok(s))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

pub fn theory(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome, CliError> {
    out.check(&["theory_claims.tsv", "note_limits.tsv"])?;
    let report = run_theory_suite(&cfg.sim_config(), &cfg.theory_config(), &cfg.suite.scenarios, cfg.execution())?;
    out.write("theory_claims.tsv", |w| io::write_claims(w, &report.claims))?;
    out.write("note_limits.tsv", |w| io::write_note_limits(w, &report.notes))?;
    let mut s = String::new();
    for c in &report.claims {
        let _ = writeln!(
            s,
            "{:<6} {:<48} predicted {:>12.6e} observed {:>12.6e} tolerance {:.3e}",
            c.status.as_str().to_uppercase(),
            c.name,
            c.predicted,
            c.observed,
            c.tolerance
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    let failure = (!failed.is_empty()).then(|| format!("{} claim(s) failed: {}", failed.len(), failed.join(", ")));
    Ok(Outcome { summary: s, failure })
}

struct Row {
    section: &'static str,
    statistic: String,
    estimate: f64,
    se: Option<f64>,
    ci: Option<(f64, f64)>,
    p: Option<f64>,
    n: usize,
}

impl Row {
    fn value(section: &'static str, statistic: impl Into<String>, estimate: f64, n: usize) -> Self {
        Row { section, statistic: statistic.into(), estimate, se: None, ci: None, p: None, n }
    }

    fn estimate(section: &'static str, statistic: impl Into<String>, e: &Estimate) -> Self {
        Row {
            section,
            statistic: statistic.into(),
            estimate: e.beta,
            se: Some(e.se),
            ci: Some(e.ci),
            p: Some(e.p),
            n: e.n,
        }
    }
}

fn parse_metric(name: &str) -> Result<Metric, CliError> {
    Metric::ALL
        .into_iter()
        .find(|m| m.as_str() == name)
        .ok_or_else(|| CliError::Usage(format!("analyze.metric {name:?} is not one of in_sample_mse, oos_mse, oos_mar, oos_medar")))
}

fn read_with<T>(path: &Path, f: impl FnOnce(File) -> crowdmf::Result<T>) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    f(file).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cutoff(cfg: &RunConfig, weeks: &[i64]) -> i64 {
    cfg.analyze.post_from_week.unwrap_or_else(|| weeks[weeks.len() / 2])
}

fn analyze_eval(cfg: &RunConfig, path: &Path, rows: &mut Vec<Row>) -> Result<(), CliError> {
    let metric = parse_metric(&cfg.analyze.metric)?;
    let weeks = read_with(path, io::read_eval_weeks)?;
    let mut week_ids = Vec::new();
    let mut base = Vec::new();
    let mut two = Vec::new();
    for w in &weeks {
        let b = w.get(Method::Baseline).and_then(|m| metric.of(m));
        let t = w.get(Method::TwoStage).and_then(|m| metric.of(m));
        if let (Some(b), Some(t)) = (b, t) {
            week_ids.push(w.week);
            base.push(b);
            two.push(t);
        }
    }
    if week_ids.len() < 4 {
        return Err(CliError::Data(format!(
            "{}: {} weeks carry both methods' {}; at least 4 are needed",
            path.display(),
            week_ids.len(),
            metric.as_str()
        )));
    }
    let gaps: Vec<f64> = base.iter().zip(&two).map(|(b, t)| b - t).collect();
    let cut = cutoff(cfg, &week_ids);
    let post: Vec<bool> = week_ids.iter().map(|&w| w >= cut).collect();
    let name = metric.as_str();
    rows.push(Row::value("eval_gap", format!("{name}_mean_gap"), gaps.iter().sum::<f64>() / gaps.len() as f64, gaps.len()));
    rows.push(Row::value("eval_gap", "post_from_week", cut as f64, gaps.len()));
    let did = weekly_gap_did(&gaps, &post, None, cfg.analyze.hac_lags)?;
    rows.push(Row::estimate("eval_gap", format!("{name}_post_shift"), &did));
    let perm = permutation_test(difference_in_means, &gaps, &post, cfg.analyze.n_perm, cfg.run.seed, cfg.execution())?;
    rows.push(Row {
        section: "eval_gap",
        statistic: format!("{name}_permutation"),
        estimate: perm.observed,
        se: None,
        ci: None,
        p: Some(perm.p),
        n: gaps.len(),
    });
    match spearman(&base, &two) {
        Ok(r) => rows.push(Row::value("eval_gap", format!("{name}_spearman"), r, base.len())),
        Err(e) => log::warn!("spearman skipped: {e}"),
    }
    Ok(())
}

fn analyze_params(cfg: &RunConfig, snap: &ParamSnapshot, rows: &mut Vec<Row>) -> Result<(), CliError> {
    let p = &snap.params;
    let k = cfg.analyze.kurtosis;
    rows.push(Row::value("params", "bimodality_rater_factor", bimodality_coefficient_with(&p.f, k)?, p.f.len()));
    rows.push(Row::value("params", "bimodality_note_intercept", bimodality_coefficient_with(&p.i, k)?, p.i.len()));
    let minority = p.f.iter().filter(|&&f| f > 0.0).count();
    rows.push(Row::value(
        "params",
        "minority_rater_share",
        jeffreys_proportion(minority as u64, p.f.len() as u64)?,
        p.f.len(),
    ));
    let [helpful, ..] = status_counts(p);
    rows.push(Row::value(
        "params",
        "helpful_note_share",
        jeffreys_proportion(helpful as u64, p.i.len() as u64)?,
        p.i.len(),
    ));
    Ok(())
}

/// Rater-by-week panel of `ln(1 + ratings)` with minority raters (positive
/// factor) as the group.
fn analyze_panel(cfg: &RunConfig, ratings: &Path, snap: &ParamSnapshot, rows: &mut Vec<Row>) -> Result<(), CliError> {
    let ing = io::ingest_ratings_tsv(ratings).map_err(|e| CliError::Data(format!("{}: {e}", ratings.display())))?;
    let stream = weekly_split(&ing.events, cfg.eval.week_anchor);
    if stream.len() < 2 {
        return Err(CliError::Data("the rater panel needs ratings in at least 2 weeks".into()));
    }
    let week_ids: Vec<i64> = stream.weeks.iter().map(|w| w.index).collect();
    let cut = cutoff(cfg, &week_ids);
    let group: HashMap<&str, bool> = snap
        .user_ids
        .iter()
        .zip(&snap.params.f)
        .map(|(id, &f)| (id.as_str(), f > 0.0))
        .collect();
    let mut panel = Vec::with_capacity(snap.user_ids.len() * stream.len());
    for w in &stream.weeks {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for e in &w.events {
            *counts.entry(e.rater_id.as_str()).or_default() += 1;
        }
        for id in &snap.user_ids {
            panel.push(PanelCell {
                unit: id.clone(),
                week: w.index,
                outcome: (counts.get(id.as_str()).copied().unwrap_or(0) as f64).ln_1p(),
                group: group[id.as_str()],
                post: w.index >= cut,
            });
        }
    }
    let e = two_way_fe_did(&panel)?;
    rows.push(Row::estimate("panel", "minority_x_post_log_ratings", &e));
    Ok(())
}

pub fn analyze(cfg: &RunConfig, inputs: &BTreeMap<String, PathBuf>, out: &mut OutDir) -> Result<Outcome, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("analyze needs at least one of --eval, --params".into()));
    }
    if inputs.contains_key(RATINGS) && !inputs.contains_key(PARAMS) {
        return Err(CliError::Usage("analyze --ratings needs --params to assign rater groups".into()));
    }
    out.check(&["analysis.tsv"])?;
    let mut rows = Vec::new();
    if let Some(p) = inputs.get(EVAL) {
        analyze_eval(cfg, p, &mut rows)?;
    }
    if let Some(p) = inputs.get(PARAMS) {
        let snap = read_with(p, io::read_params)?;
        analyze_params(cfg, &snap, &mut rows)?;
        if let Some(r) = inputs.get(RATINGS) {
            analyze_panel(cfg, r, &snap, &mut rows)?;
        }
    }
    let opt = |v: Option<f64>| v.map_or_else(|| io::NA.to_string(), |x| x.to_string());
    let mut table = String::from("section\tstatistic\testimate\tse\tci_low\tci_high\tp\tn\n");
    let mut s = String::new();
    for r in &rows {
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.section,
            r.statistic,
            r.estimate,
            opt(r.se),
            opt(r.ci.map(|c| c.0)),
            opt(r.ci.map(|c| c.1)),
            opt(r.p),
            r.n
        );
        let _ = write!(s, "{:<9} {:<32} {:>12.6}", r.section, r.statistic, r.estimate);
        if let Some(se) = r.se {
            let _ = write!(s, "  se {se:.6}");
        }
        if let Some(p) = r.p {
            let _ = write!(s, "  p {p:.4}");
        }
        let _ = writeln!(s, "  n {}", r.n);
    }
    out.write_text("analysis.tsv", &table)?;
    Ok(Outcome::ok(s))
}
