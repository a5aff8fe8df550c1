//! Weekly rolling fits with one-week-ahead scoring, baseline against
//! two-stage.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ParamSnapshot;
use crate::mf::{self, filter_observations, FilterThresholds, FitConfig, Init};
use crate::model::{DuplicatePolicy, LatentParams, ObservationSet, RatingEvent, ValueSource};
use crate::rng::substream;
use crate::sim::WEEK_MS;
use crate::twostage::{two_stage_fit, TwoStageConfig};

const DAY_MS: i64 = 24 * 3600 * 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weekday {
    #[default]
    Monday,
    Tuesday,
    Wednesday,
    Thursday,
    Friday,
    Saturday,
    Sunday,
}

impl Weekday {
    /// Milliseconds from the Unix epoch (a Thursday) to the first 00:00 UTC
    /// of this weekday.
    pub fn epoch_offset_ms(self) -> i64 {
        ((self as i64) - 3).rem_euclid(7) * DAY_MS
    }
}

/// Calendar week holding `t`, counted from the anchor weekday after the epoch.
pub fn week_index(t_ms: i64, anchor: Weekday) -> i64 {
    (t_ms - anchor.epoch_offset_ms()).div_euclid(WEEK_MS)
}

pub fn week_start_ms(index: i64, anchor: Weekday) -> i64 {
    anchor.epoch_offset_ms() + index * WEEK_MS
}

#[derive(Clone, Debug, PartialEq)]
pub struct Week {
    pub index: i64,
    pub start_ms: i64,
    pub events: Vec<RatingEvent>,
}

/// Consecutive calendar weeks from the first to the last event; weeks
/// without events are kept empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeeklyStream {
    pub weeks: Vec<Week>,
}

impl WeeklyStream {
    pub fn len(&self) -> usize {
        self.weeks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weeks.is_empty()
    }

    /// All events of weeks `0..=t`.
    pub fn cumulative_events(&self, t: usize) -> Vec<RatingEvent> {
        self.weeks[..=t].iter().flat_map(|w| w.events.iter().cloned()).collect()
    }

    pub fn cumulative(&self, t: usize, policy: DuplicatePolicy, source: ValueSource) -> Result<ObservationSet> {
        ObservationSet::from_events(&self.cumulative_events(t), policy, source)
    }
}

/// Buckets events by half-open calendar weeks `[start, start + 7 days)`.
pub fn weekly_split(events: &[RatingEvent], anchor: Weekday) -> WeeklyStream {
    let Some(first) = events.iter().map(|e| week_index(e.created_at_ms, anchor)).min() else {
        return WeeklyStream::default();
    };
    let last = events.iter().map(|e| week_index(e.created_at_ms, anchor)).max().unwrap_or(first);
    let mut weeks: Vec<Week> = (first..=last)
        .map(|index| Week { index, start_ms: week_start_ms(index, anchor), events: Vec::new() })
        .collect();
    for e in events {
        let k = (week_index(e.created_at_ms, anchor) - first) as usize;
        weeks[k].events.push(e.clone());
    }
    for w in &mut weeks {
        w.events.sort_by_key(|e| e.created_at_ms);
    }
    WeeklyStream { weeks }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    TwoStage,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which week-(t+1) ratings are scored out of sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eligibility {
    /// Rater and note both have parameters in the week-t filtered fit.
    #[default]
    FittedAtWeek,
    /// As above, and both also rated or were rated during week t.
    RatedDuringWeek,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub fit: FitConfig,
    pub two_stage: TwoStageConfig,
    pub filter: FilterThresholds,
    /// Weeks folded into the initial warm fit before scoring starts.
    pub warm_weeks: usize,
    pub value_source: ValueSource,
    pub duplicate_policy: DuplicatePolicy,
    pub eligibility: Eligibility,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            two_stage: TwoStageConfig::default(),
            filter: FilterThresholds::default(),
            warm_weeks: 4,
            value_source: ValueSource::Rating,
            duplicate_policy: DuplicatePolicy::KeepLatest,
            eligibility: Eligibility::FittedAtWeek,
        }
    }
}

/// Error summaries for one method in one week; `None` where nothing was
/// scored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeekMetrics {
    pub in_sample_n: usize,
    pub in_sample_mse: Option<f64>,
    pub oos_n: usize,
    pub oos_mse: Option<f64>,
    pub oos_mar: Option<f64>,
    pub oos_medar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeekRow {
    pub week: i64,
    pub start_ms: i64,
    pub raters: usize,
    pub notes: usize,
    pub ratings: usize,
    pub metrics: Vec<(Method, WeekMetrics)>,
}

impl WeekRow {
    pub fn get(&self, m: Method) -> Option<&WeekMetrics> {
        self.metrics.iter().find(|(k, _)| *k == m).map(|(_, v)| v)
    }
}

/// Mean over weeks with a value and a normal 95% interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub metric: Metric,
    pub weeks: usize,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    InSampleMse,
    OosMse,
    OosMar,
    OosMedar,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::InSampleMse, Metric::OosMse, Metric::OosMar, Metric::OosMedar];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::InSampleMse => "in_sample_mse",
            Metric::OosMse => "oos_mse",
            Metric::OosMar => "oos_mar",
            Metric::OosMedar => "oos_medar",
        }
    }

    pub fn of(self, m: &WeekMetrics) -> Option<f64> {
        match self {
            Metric::InSampleMse => m.in_sample_mse,
            Metric::OosMse => m.oos_mse,
            Metric::OosMar => m.oos_mar,
            Metric::OosMedar => m.oos_medar,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<Method>,
    pub weeks: Vec<WeekRow>,
    pub aggregates: Vec<Aggregate>,
    /// Parameters of the last scored week per method.
    pub final_params: Vec<(Method, ParamSnapshot)>,
}

fn mean_ci(xs: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(m), None, None);
    }
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let half = 1.96 * sd / n.sqrt();
    (Some(m), Some(m - half), Some(m + half))
}

fn aggregates(methods: &[Method], weeks: &[WeekRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &method in methods {
        for metric in Metric::ALL {
            let xs: Vec<f64> = weeks
                .iter()
                .filter_map(|w| w.get(method).and_then(|m| metric.of(m)))
                .collect();
            let (mean, ci_low, ci_high) = mean_ci(&xs);
            out.push(Aggregate { method, metric, weeks: xs.len(), mean, ci_low, ci_high });
        }
    }
    out
}

/// Residual summaries `(n, mse, mar, medar)` over scored pairs.
pub fn residual_metrics(residuals: &[f64]) -> (usize, Option<f64>, Option<f64>, Option<f64>) {
    if residuals.is_empty() {
        return (0, None, None, None);
    }
    let n = residuals.len() as f64;
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let mar = abs.iter().sum::<f64>() / n;
    abs.sort_by(f64::total_cmp);
    let k = abs.len();
    let medar = if k % 2 == 1 { abs[k / 2] } else { 0.5 * (abs[k / 2 - 1] + abs[k / 2]) };
    (k, Some(mse), Some(mar), Some(medar))
}

/// Starting point for `obs` built from an earlier fit: known ids keep their
/// values, new ids start with zero intercepts and small random factors.
pub fn align_warm_start(prev: &ParamSnapshot, obs: &ObservationSet, seed: u64, scale: f64) -> LatentParams {
    let users: HashMap<&str, usize> = prev.user_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let notes: HashMap<&str, usize> = prev.note_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut rng = substream(seed, "warm-new", 0);
    let mut draw = || scale * (2.0 * rng.random::<f64>() - 1.0);
    let p = &prev.params;
    let mut out = LatentParams::zeros(obs.num_users(), obs.num_notes());
    out.mu = p.mu;
    for (u, id) in obs.user_ids().iter().enumerate() {
        match users.get(id.as_str()) {
            Some(&k) => {
                out.h[u] = p.h[k];
                out.f[u] = p.f[k];
            }
            None => out.f[u] = draw(),
        }
    }
    for (n, id) in obs.note_ids().iter().enumerate() {
        match notes.get(id.as_str()) {
            Some(&k) => {
                out.i[n] = p.i[k];
                out.g[n] = p.g[k];
            }
            None => out.g[n] = draw(),
        }
    }
    out
}

fn fit_method(
    method: Method,
    obs: &ObservationSet,
    prev: Option<&ParamSnapshot>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<LatentParams> {
    let mut fit_cfg = cfg.fit.clone();
    if let Some(p) = prev {
        let scale = match cfg.fit.init {
            Init::Random { scale } => scale,
            Init::WarmStart(_) => Init::DEFAULT_SCALE,
        };
        fit_cfg.init = Init::WarmStart(align_warm_start(p, obs, seed, scale));
    }
    fit_cfg.seed = seed;
    Ok(match method {
        Method::Baseline => mf::fit(obs, &fit_cfg, None)?.params,
        Method::TwoStage => {
            let ts = TwoStageConfig { auto_filter: None, ..cfg.two_stage.clone() };
            two_stage_fit(obs, &fit_cfg, &ts)?.second.params
        }
    })
}

/// Rolling weekly evaluation. Each method keeps its own warm-start track,
/// seeded by one baseline fit on the first `warm_weeks` weeks.
pub fn rolling_evaluate(stream: &WeeklyStream, methods: &[Method], cfg: &EvalConfig) -> Result<EvalReport> {
    if stream.len() <= cfg.warm_weeks {
        return Err(Error::InvalidConfig(format!(
            "warm_weeks = {} needs more than {} weeks of data",
            cfg.warm_weeks,
            stream.len()
        )));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods to evaluate".into()));
    }
    let filtered = |t: usize| -> Result<ObservationSet> {
        let all = stream.cumulative(t, cfg.duplicate_policy, cfg.value_source)?;
        Ok(filter_observations(&all, cfg.filter))
    };
    let mut tracks: HashMap<Method, Option<ParamSnapshot>> = methods.iter().map(|&m| (m, None)).collect();
    if cfg.warm_weeks > 0 {
        let obs = filtered(cfg.warm_weeks - 1)?;
        if !obs.is_empty() {
            let p = fit_method(Method::Baseline, &obs, None, cfg, cfg.fit.seed)?;
            let snap = ParamSnapshot::new(p, obs.user_ids().to_vec(), obs.note_ids().to_vec())?;
            for slot in tracks.values_mut() {
                *slot = Some(snap.clone());
            }
        }
    }

    let mut weeks = Vec::new();
    for t in cfg.warm_weeks..stream.len() {
        let week = &stream.weeks[t];
        let obs = filtered(t)?;
        let next = stream.weeks.get(t + 1);
        let active: (HashSet<&str>, HashSet<&str>) = (
            week.events.iter().map(|e| e.rater_id.as_str()).collect(),
            week.events.iter().map(|e| e.note_id.as_str()).collect(),
        );
        let mut row = WeekRow {
            week: week.index,
            start_ms: week.start_ms,
            raters: obs.num_users(),
            notes: obs.num_notes(),
            ratings: obs.len(),
            metrics: Vec::new(),
        };
        if obs.is_empty() {
            log::warn!(
                "week {} is empty after filtering (min {} ratings per note, {} notes per rater)",
                week.index,
                cfg.filter.min_ratings_per_note,
                cfg.filter.min_notes_per_rater
            );
            row.metrics = methods.iter().map(|&m| (m, WeekMetrics::default())).collect();
            weeks.push(row);
            continue;
        }
        for &method in methods {
            let seed = cfg.fit.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let params = fit_method(method, &obs, tracks[&method].as_ref(), cfg, seed)?;
            let score = |events: &[RatingEvent], require_active: bool| -> Vec<f64> {
                events
                    .iter()
                    .filter_map(|e| {
                        let u = obs.user_index(&e.rater_id)?;
                        let n = obs.note_index(&e.note_id)?;
                        if require_active
                            && !(active.0.contains(e.rater_id.as_str()) && active.1.contains(e.note_id.as_str()))
                        {
                            return None;
                        }
                        Some(e.value(cfg.value_source) - params.predict(u, n))
                    })
                    .collect()
            };
            let (in_n, in_mse, _, _) = residual_metrics(&score(&week.events, false));
            let oos = next
                .map(|w| score(&w.events, cfg.eligibility == Eligibility::RatedDuringWeek))
                .unwrap_or_default();
            let (oos_n, oos_mse, oos_mar, oos_medar) = residual_metrics(&oos);
            row.metrics.push((
                method,
                WeekMetrics { in_sample_n: in_n, in_sample_mse: in_mse, oos_n, oos_mse, oos_mar, oos_medar },
            ));
            let snap = ParamSnapshot::new(params, obs.user_ids().to_vec(), obs.note_ids().to_vec())?;
            tracks.insert(method, Some(snap));
        }
        weeks.push(row);
    }
    let final_params = methods
        .iter()
        .filter_map(|m| tracks[m].clone().map(|s| (*m, s)))
        .collect();
    Ok(EvalReport {
        methods: methods.to_vec(),
        aggregates: aggregates(methods, &weeks),
        weeks,
        final_params,
    })
}

/// `(baseline − two_stage)/baseline` in percent; `None` when the baseline
/// is zero or either value is missing.
pub fn percent_improvement(baseline: Option<f64>, two_stage: Option<f64>) -> Option<f64> {
    match (baseline, two_stage) {
        (Some(b), Some(t)) if b != 0.0 => Some(100.0 * (b - t) / b),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub week: i64,
    pub metric: Metric,
    pub baseline: Option<f64>,
    pub two_stage: Option<f64>,
    pub improvement_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Mean weekly improvement per metric over weeks where it is defined.
    pub average_pct: Vec<(Metric, Option<f64>)>,
    /// Share of weeks, among those with both values, where two-stage is lower.
    pub win_share: Vec<(Metric, Option<f64>)>,
}

pub fn compare_methods(report: &EvalReport) -> Result<Comparison> {
    for m in [Method::Baseline, Method::TwoStage] {
        if !report.methods.contains(&m) {
            return Err(Error::InvalidConfig(format!("report has no {m} results")));
        }
    }
    let mut rows = Vec::new();
    for w in &report.weeks {
        for metric in Metric::ALL {
            let b = w.get(Method::Baseline).and_then(|m| metric.of(m));
            let t = w.get(Method::TwoStage).and_then(|m| metric.of(m));
            rows.push(ComparisonRow { week: w.week, metric, baseline: b, two_stage: t, improvement_pct: percent_improvement(b, t) });
        }
    }
    let mut average_pct = Vec::new();
    let mut win_share = Vec::new();
    for metric in Metric::ALL {
        let sel: Vec<&ComparisonRow> = rows.iter().filter(|r| r.metric == metric).collect();
        let imp: Vec<f64> = sel.iter().filter_map(|r| r.improvement_pct).collect();
        average_pct.push((metric, (!imp.is_empty()).then(|| imp.iter().sum::<f64>() / imp.len() as f64)));
        let both: Vec<(f64, f64)> = sel.iter().filter_map(|r| Some((r.baseline?, r.two_stage?))).collect();
        let wins = both.iter().filter(|(b, t)| t < b).count();
        win_share.push((metric, (!both.is_empty()).then(|| wins as f64 / both.len() as f64)));
    }
    Ok(Comparison { rows, average_pct, win_share })
}

impl Comparison {
    pub fn average(&self, metric: Metric) -> Option<f64> {
        self.average_pct.iter().find(|(m, _)| *m == metric).and_then(|(_, v)| *v)
    }

    pub fn wins(&self, metric: Metric) -> Option<f64> {
        self.win_share.iter().find(|(m, _)| *m == metric).and_then(|(_, v)| *v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DEFAULT_START_MS;

    fn ev(u: &str, n: &str, t: i64) -> RatingEvent {
        RatingEvent::new(u, n, t, 1.0).unwrap()
    }

    #[test]
    fn monday_anchor() {
        assert_eq!(Weekday::Monday.epoch_offset_ms(), 4 * DAY_MS);
        assert_eq!(Weekday::Thursday.epoch_offset_ms(), 0);
        assert_eq!(week_start_ms(week_index(DEFAULT_START_MS, Weekday::Monday), Weekday::Monday), DEFAULT_START_MS);
    }

    #[test]
    fn split_single_week_and_boundary() {
        let s = weekly_split(&[ev("a", "x", DEFAULT_START_MS + 5), ev("b", "x", DEFAULT_START_MS + 9)], Weekday::Monday);
        assert_eq!(s.len(), 1);
        let b = DEFAULT_START_MS + WEEK_MS;
        let s = weekly_split(&[ev("a", "x", b - 1), ev("b", "x", b)], Weekday::Monday);
        assert_eq!(s.len(), 2);
        assert_eq!(s.weeks[1].events[0].rater_id, "b");
        assert_eq!(s.weeks[1].start_ms, b);
    }

    #[test]
    fn gaps_are_kept_and_cumulative_nests() {
        let s = weekly_split(
            &[ev("a", "x", DEFAULT_START_MS), ev("b", "x", DEFAULT_START_MS + 3 * WEEK_MS)],
            Weekday::Monday,
        );
        assert_eq!(s.len(), 4);
        let sizes: Vec<usize> = (0..4).map(|t| s.cumulative_events(t).len()).collect();
        assert_eq!(sizes, vec![1, 1, 1, 2]);
    }

    #[test]
    fn metrics_and_nulls() {
        assert_eq!(residual_metrics(&[]), (0, None, None, None));
        let (n, mse, mar, med) = residual_metrics(&[1.0, -3.0, 2.0, 0.0]);
        assert_eq!(n, 4);
        assert_eq!(mse, Some(3.5));
        assert_eq!(mar, Some(1.5));
        assert_eq!(med, Some(1.5));
    }

    #[test]
    fn improvement_arithmetic() {
        assert_eq!(percent_improvement(Some(0.2), Some(0.2)), Some(0.0));
        assert!((percent_improvement(Some(0.10), Some(0.09)).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(percent_improvement(Some(0.0), Some(0.1)), None);
        assert_eq!(percent_improvement(None, Some(0.1)), None);
    }

    #[test]
    fn warm_weeks_must_leave_a_week() {
        let s = weekly_split(&[ev("a", "x", DEFAULT_START_MS)], Weekday::Monday);
        let cfg = EvalConfig { warm_weeks: 1, ..EvalConfig::default() };
        assert!(rolling_evaluate(&s, &[Method::Baseline], &cfg).is_err());
    }
}
