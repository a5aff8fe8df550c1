//! Synthetic ratings from raters who mix a noisy private signal with the
//! consensus they expect the platform to reach.
//!
//! Rater `u` sees `r* = s_un + ε_un` with `s_un = μ + h_u + i_n + f_u g_n`,
//! forecasts the consensus as `m̃_un = m_n + ε^m_un`, and reports
//! `a = ρ(c_n) r* + (1 − ρ(c_n)) m̃_un`. Every cell draws from its own
//! substream, so parallel and sequential generation agree bit for bit.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{discretize_report, LatentParams, ObservationSet, RatingEvent, ValueSource};
use crate::model::DuplicatePolicy;
use crate::rng::{substream, StreamRng};

/// Noise draws are standard normals rejected outside `±TRUNCATION`.
pub const TRUNCATION: f64 = 6.0;

/// 2023-06-05 00:00 UTC, a Monday.
pub const DEFAULT_START_MS: i64 = 1_685_923_200_000;
pub const WEEK_MS: i64 = 7 * 24 * 3600 * 1000;

const MEAN_ZERO_TOL: f64 = 1e-12;

pub fn user_id(u: usize) -> String {
    format!("u{u}")
}

pub fn note_id(n: usize) -> String {
    format!("n{n}")
}

fn parse_id(id: &str, prefix: char) -> Option<usize> {
    id.strip_prefix(prefix)?.parse().ok()
}

/// Population index of a rater id made by [`user_id`].
pub fn parse_user_id(id: &str) -> Option<usize> {
    parse_id(id, 'u')
}

/// Population index of a note id made by [`note_id`].
pub fn parse_note_id(id: &str) -> Option<usize> {
    parse_id(id, 'n')
}

fn truncated_standard_normal(rng: &mut StreamRng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= TRUNCATION {
            return z;
        }
    }
}

/// A bounded scalar distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Point { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Normal(mean, sd) conditioned on `[lo, hi]`.
    TruncNormal { mean: f64, sd: f64, lo: f64, hi: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDistribution(m));
        match *self {
            Dist::Point { value } if !value.is_finite() => bad(format!("point mass at {value}")),
            Dist::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                bad(format!("uniform bounds [{lo}, {hi}]"))
            }
            Dist::TruncNormal { mean, sd, lo, hi } => {
                if !(mean.is_finite() && sd.is_finite() && sd > 0.0 && lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("truncated normal mean={mean} sd={sd} bounds [{lo}, {hi}]"));
                }
                let n = Normal::new(mean, sd).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
                if n.cdf(hi) - n.cdf(lo) < 1e-3 {
                    return bad(format!("truncated normal keeps too little mass in [{lo}, {hi}]"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Dist::Point { value } => (value, value),
            Dist::Uniform { lo, hi } | Dist::TruncNormal { lo, hi, .. } => (lo, hi),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Point { value } => value,
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::TruncNormal { mean, sd, lo, hi } => {
                let z = Normal::new(0.0, 1.0).expect("standard normal");
                let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
                mean + sd * (z.pdf(a) - z.pdf(b)) / (z.cdf(b) - z.cdf(a))
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Dist::Point { .. } => 0.0,
            Dist::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Dist::TruncNormal { mean, sd, lo, hi } => {
                let z = Normal::new(0.0, 1.0).expect("standard normal");
                let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
                let mass = z.cdf(b) - z.cdf(a);
                let r = (z.pdf(a) - z.pdf(b)) / mass;
                sd * sd * (1.0 + (a * z.pdf(a) - b * z.pdf(b)) / mass - r * r)
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Dist::Point { value } => f64::from(u8::from(x >= value)),
            Dist::Uniform { lo, hi } => {
                if x < lo {
                    0.0
                } else if x >= hi {
                    1.0
                } else {
                    (x - lo) / (hi - lo)
                }
            }
            Dist::TruncNormal { mean, sd, lo, hi } => {
                if x < lo {
                    return 0.0;
                }
                if x >= hi {
                    return 1.0;
                }
                let n = Normal::new(mean, sd).expect("validated");
                (n.cdf(x) - n.cdf(lo)) / (n.cdf(hi) - n.cdf(lo))
            }
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            Dist::Point { value } => value,
            Dist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Dist::TruncNormal { mean, sd, lo, hi } => loop {
                let x = mean + sd * rng.sample::<f64, _>(StandardNormal);
                if (lo..=hi).contains(&x) {
                    return x;
                }
            },
        }
    }
}

/// Per-rater idiosyncratic noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Constant { sigma: f64 },
    /// The first `round(fraction·U)` raters get `sigma_hi`, the rest `sigma_lo`.
    TwoGroup { sigma_lo: f64, sigma_hi: f64, fraction: f64 },
    PerUser { sigmas: Vec<f64> },
}

impl NoiseSpec {
    pub fn sigmas(&self, num_users: usize) -> Result<Vec<f64>> {
        let out = match self {
            NoiseSpec::Constant { sigma } => vec![*sigma; num_users],
            NoiseSpec::TwoGroup { sigma_lo, sigma_hi, fraction } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::InvalidConfig(format!("noise fraction {fraction} outside [0, 1]")));
                }
                let k = (fraction * num_users as f64).round() as usize;
                (0..num_users).map(|u| if u < k { *sigma_hi } else { *sigma_lo }).collect()
            }
            NoiseSpec::PerUser { sigmas } => {
                if sigmas.len() != num_users {
                    return Err(Error::DimensionMismatch {
                        what: "per-user noise",
                        expected: num_users,
                        found: sigmas.len(),
                    });
                }
                sigmas.clone()
            }
        };
        if let Some(s) = out.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidConfig(format!("noise scale {s} must be finite and >= 0")));
        }
        Ok(out)
    }
}

/// Conformity weight as a function of controversy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RhoFn {
    /// `ρ(c) = 1 − κ c`.
    Linear { kappa: f64 },
    /// `high` below `threshold`, `low` from it on.
    Step { threshold: f64, high: f64, low: f64 },
}

impl RhoFn {
    pub fn truthful() -> Self {
        RhoFn::Linear { kappa: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RhoFn::Linear { kappa } if !(0.0..=1.0).contains(&kappa) => {
                Err(Error::InvalidConfig(format!("kappa {kappa} outside [0, 1]")))
            }
            RhoFn::Step { threshold, high, low }
                if !(threshold.is_finite()
                    && (0.0..=1.0).contains(&high)
                    && (0.0..=1.0).contains(&low)
                    && low <= high) =>
            {
                Err(Error::InvalidConfig(format!(
                    "step rho needs 0 <= low <= high <= 1, got low={low} high={high}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, c: f64) -> f64 {
        match *self {
            RhoFn::Linear { kappa } => 1.0 - kappa * c,
            RhoFn::Step { threshold, high, low } => {
                if c < threshold {
                    high
                } else {
                    low
                }
            }
        }
    }
}

/// Forecast-noise scale `σ_m(c) = base + slope·c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastNoise {
    pub base: f64,
    pub slope: f64,
}

impl ForecastNoise {
    pub fn at(&self, c: f64) -> f64 {
        self.base + self.slope * c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "U")]
    pub num_users: usize,
    #[serde(rename = "N")]
    pub num_notes: usize,
    pub p: f64,
    pub mu: f64,
    /// Mean of the rater factor.
    pub mu_f: f64,
    pub dist_h: Dist,
    pub dist_i: Dist,
    /// Distribution of `f_u − mu_f`.
    pub dist_f: Dist,
    pub dist_g: Dist,
    pub sigma_eps: NoiseSpec,
    pub controversy: Dist,
    pub rho_fn: RhoFn,
    pub consensus: Dist,
    pub sigma_m: ForecastNoise,
    /// Add the rater noise after mixing instead of inside `r*`.
    pub noise_after_mixing: bool,
    /// Fit on the three-level ratings instead of the continuous reports.
    pub discretize: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_users: 300,
            num_notes: 300,
            p: 0.3,
            mu: 0.0,
            mu_f: 0.5,
            dist_h: Dist::Uniform { lo: -0.2, hi: 0.2 },
            dist_i: Dist::Uniform { lo: -0.4, hi: 0.4 },
            dist_f: Dist::Uniform { lo: -1.0, hi: 1.0 },
            dist_g: Dist::Uniform { lo: -0.5, hi: 0.5 },
            sigma_eps: NoiseSpec::Constant { sigma: 0.1 },
            controversy: Dist::Uniform { lo: 0.0, hi: 1.0 },
            rho_fn: RhoFn::truthful(),
            consensus: Dist::Uniform { lo: -0.5, hi: 0.5 },
            sigma_m: ForecastNoise { base: 0.05, slope: 0.0 },
            noise_after_mixing: false,
            discretize: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_notes == 0 {
            return Err(Error::InvalidConfig("U and N must be positive".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidConfig(format!("p = {} outside (0, 1]", self.p)));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidConfig("mu must be finite".into()));
        }
        if !(self.mu_f > 0.0 && self.mu_f.is_finite()) {
            return Err(Error::InvalidConfig(format!("mu_f = {} must be > 0", self.mu_f)));
        }
        for (name, d) in [
            ("dist_h", &self.dist_h),
            ("dist_i", &self.dist_i),
            ("dist_f", &self.dist_f),
            ("dist_g", &self.dist_g),
        ] {
            d.validate()?;
            if d.mean().abs() > MEAN_ZERO_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "{name} must have mean zero, has {}",
                    d.mean()
                )));
            }
        }
        self.controversy.validate()?;
        let (lo, hi) = self.controversy.bounds();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::InvalidDistribution(format!(
                "controversy must lie in [0, 1], bounds are [{lo}, {hi}]"
            )));
        }
        self.consensus.validate()?;
        self.rho_fn.validate()?;
        for c in [lo, hi] {
            let r = self.rho_fn.eval(c);
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("rho({c}) = {r} outside [0, 1]")));
            }
        }
        let ForecastNoise { base, slope } = self.sigma_m;
        if !(base.is_finite() && slope.is_finite() && base >= 0.0 && base + slope * hi >= 0.0 && base + slope * lo >= 0.0) {
            return Err(Error::InvalidConfig("forecast noise must be >= 0 on the controversy range".into()));
        }
        self.sigma_eps.sigmas(self.num_users)?;
        Ok(())
    }

    pub fn value_source(&self) -> ValueSource {
        if self.discretize {
            ValueSource::Rating
        } else {
            ValueSource::Latent
        }
    }
}

/// Ground truth behind a simulated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTruth {
    /// Uncentred parameters with `E[f] = mu_f`.
    pub theta0: LatentParams,
    pub mu_f: f64,
    pub c_n: Vec<f64>,
    pub rho_n: Vec<f64>,
    pub m_n: Vec<f64>,
    pub delta_n: Vec<f64>,
    pub sigma_u: Vec<f64>,
    pub sigma_m: ForecastNoise,
    pub noise_after_mixing: bool,
}

impl SimTruth {
    pub fn signal(&self, u: usize, n: usize) -> f64 {
        self.theta0.predict(u, n)
    }

    /// Truth restricted to the given rater and note indices, in that order.
    pub fn select(&self, users: &[usize], notes: &[usize]) -> SimTruth {
        let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&k| v[k]).collect::<Vec<_>>();
        let t = &self.theta0;
        SimTruth {
            theta0: LatentParams {
                mu: t.mu,
                h: pick(&t.h, users),
                i: pick(&t.i, notes),
                f: pick(&t.f, users),
                g: pick(&t.g, notes),
            },
            mu_f: self.mu_f,
            c_n: pick(&self.c_n, notes),
            rho_n: pick(&self.rho_n, notes),
            m_n: pick(&self.m_n, notes),
            delta_n: pick(&self.delta_n, notes),
            sigma_u: pick(&self.sigma_u, users),
            sigma_m: self.sigma_m,
            noise_after_mixing: self.noise_after_mixing,
        }
    }

    /// Truth aligned with the dense indices of `obs`, whose ids must come
    /// from [`user_id`] and [`note_id`].
    pub fn aligned_to(&self, obs: &ObservationSet) -> Result<SimTruth> {
        let map = |ids: &[String], prefix: char, len: usize| {
            ids.iter()
                .map(|id| {
                    parse_id(id, prefix)
                        .filter(|&k| k < len)
                        .ok_or_else(|| Error::InvalidConfig(format!("id {id} is not a simulated id")))
                })
                .collect::<Result<Vec<_>>>()
        };
        let users = map(obs.user_ids(), 'u', self.sigma_u.len())?;
        let notes = map(obs.note_ids(), 'n', self.c_n.len())?;
        Ok(self.select(&users, &notes))
    }
}

/// Draws the population. User-side and note-side blocks come from separate
/// substreams.
pub fn sample_population(cfg: &SimConfig) -> Result<SimTruth> {
    cfg.validate()?;
    let (nu, nn) = (cfg.num_users, cfg.num_notes);
    let draw = |d: &Dist, tag: &str, k: usize| {
        let mut rng = substream(cfg.seed, tag, 0);
        (0..k).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
    };
    let h = draw(&cfg.dist_h, "pop-h", nu);
    let f: Vec<f64> = draw(&cfg.dist_f, "pop-f", nu).into_iter().map(|x| cfg.mu_f + x).collect();
    let i = draw(&cfg.dist_i, "pop-i", nn);
    let g = draw(&cfg.dist_g, "pop-g", nn);
    let c_n = draw(&cfg.controversy, "pop-c", nn);
    let m_n = draw(&cfg.consensus, "pop-m", nn);
    let rho_n: Vec<f64> = c_n.iter().map(|&c| cfg.rho_fn.eval(c)).collect();
    let delta_n = m_n.iter().zip(&i).map(|(m, i)| m - (cfg.mu + i)).collect();
    Ok(SimTruth {
        theta0: LatentParams { mu: cfg.mu, h, i, f, g },
        mu_f: cfg.mu_f,
        c_n,
        rho_n,
        m_n,
        delta_n,
        sigma_u: cfg.sigma_eps.sigmas(nu)?,
        sigma_m: cfg.sigma_m,
        noise_after_mixing: cfg.noise_after_mixing,
    })
}

/// `s_un + ε_un`.
pub fn latent_signal(truth: &SimTruth, u: usize, n: usize, rng: &mut StreamRng) -> f64 {
    truth.signal(u, n) + truth.sigma_u[u] * truncated_standard_normal(rng)
}

/// `m_n + ε^m_un` with scale `σ_m(c_n)`.
pub fn anticipated_consensus(truth: &SimTruth, _u: usize, n: usize, rng: &mut StreamRng) -> f64 {
    truth.m_n[n] + truth.sigma_m.at(truth.c_n[n]) * truncated_standard_normal(rng)
}

/// A rater's report on one note.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    pub latent: f64,
    pub discrete: f64,
}

/// Mixes a signal draw with a consensus draw. The signal noise is drawn
/// first in both noise placements so the streams line up.
pub fn report(truth: &SimTruth, u: usize, n: usize, rng: &mut StreamRng) -> Report {
    let rho = truth.rho_n[n];
    let latent = if truth.noise_after_mixing {
        let eps = truth.sigma_u[u] * truncated_standard_normal(rng);
        let m = anticipated_consensus(truth, u, n, rng);
        rho * truth.signal(u, n) + (1.0 - rho) * m + eps
    } else {
        let r = latent_signal(truth, u, n, rng);
        let m = anticipated_consensus(truth, u, n, rng);
        rho * r + (1.0 - rho) * m
    };
    Report {
        latent,
        discrete: discretize_report(latent),
    }
}

/// Timing of ratings for a weekly stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub weeks: usize,
    /// Week of first rating is `note / notes_per_week`.
    pub notes_per_week: usize,
    /// Probability ratio between consecutive weeks of a note's age.
    pub age_decay: f64,
    pub start_ms: i64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            weeks: 40,
            notes_per_week: 30,
            age_decay: 0.5,
            start_ms: DEFAULT_START_MS,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, num_notes: usize) -> Result<()> {
        if self.weeks == 0 || self.notes_per_week == 0 {
            return Err(Error::InvalidConfig("weeks and notes_per_week must be positive".into()));
        }
        if !(self.age_decay > 0.0 && self.age_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("age_decay {} outside (0, 1]", self.age_decay)));
        }
        if self.start_ms < 0 {
            return Err(Error::InvalidConfig("start_ms must be >= 0".into()));
        }
        if num_notes > self.weeks * self.notes_per_week {
            return Err(Error::InvalidConfig(format!(
                "{num_notes} notes do not fit in {} weeks of {}",
                self.weeks, self.notes_per_week
            )));
        }
        Ok(())
    }

    fn timestamp(&self, n: usize, rng: &mut StreamRng) -> i64 {
        let born = n / self.notes_per_week;
        let span = self.weeks - born;
        // truncated geometric age in whole weeks
        let total: f64 = (0..span).map(|k| self.age_decay.powi(k as i32)).sum();
        let mut x = rng.random::<f64>() * total;
        let mut age = span - 1;
        for k in 0..span {
            let w = self.age_decay.powi(k as i32);
            if x < w {
                age = k;
                break;
            }
            x -= w;
        }
        let offset = (rng.random::<f64>() * WEEK_MS as f64) as i64;
        self.start_ms + ((born + age) as i64) * WEEK_MS + offset.min(WEEK_MS - 1)
    }
}

/// A simulated dataset with the events it was built from.
#[derive(Clone, Debug)]
pub struct SimDataset {
    pub events: Vec<RatingEvent>,
    pub observations: ObservationSet,
    pub truth: SimTruth,
}

fn simulate(
    cfg: &SimConfig,
    truth: SimTruth,
    noise_seed: u64,
    stream: Option<&StreamConfig>,
    exec: Execution,
) -> Result<SimDataset> {
    cfg.validate()?;
    if truth.sigma_u.len() != cfg.num_users || truth.c_n.len() != cfg.num_notes {
        return Err(Error::DimensionMismatch {
            what: "simulation truth",
            expected: cfg.num_users * cfg.num_notes,
            found: truth.sigma_u.len() * truth.c_n.len(),
        });
    }
    if let Some(s) = stream {
        s.validate(cfg.num_notes)?;
    }
    let nn = cfg.num_notes;
    let rows = exec::map_range(exec, cfg.num_users, |u| {
        let mut row = Vec::new();
        for n in 0..nn {
            let mut rng = substream(noise_seed, "cell", (u * nn + n) as u64);
            if rng.random::<f64>() >= cfg.p {
                continue;
            }
            let r = report(&truth, u, n, &mut rng);
            let ts = match stream {
                Some(s) => s.timestamp(n, &mut rng),
                None => DEFAULT_START_MS + (u * nn + n) as i64,
            };
            row.push((n, ts, r));
        }
        row
    });
    let mut events = Vec::new();
    for (u, row) in rows.into_iter().enumerate() {
        for (n, ts, r) in row {
            events.push(RatingEvent::new(user_id(u), note_id(n), ts, r.discrete)?.with_latent(r.latent));
        }
    }
    events.sort_by_key(|e| e.created_at_ms);
    if events.is_empty() {
        log::warn!("simulation produced no observations (p = {})", cfg.p);
    }
    let observations = ObservationSet::from_events(&events, DuplicatePolicy::KeepLatest, cfg.value_source())?;
    Ok(SimDataset { events, observations, truth })
}

/// One report per cell, each cell kept independently with probability `p`.
pub fn generate_dataset(cfg: &SimConfig) -> Result<SimDataset> {
    generate_dataset_with(cfg, Execution::default())
}

pub fn generate_dataset_with(cfg: &SimConfig, exec: Execution) -> Result<SimDataset> {
    simulate(cfg, sample_population(cfg)?, cfg.seed, None, exec)
}

/// Fresh observation pattern and noise for an existing population.
pub fn generate_for_truth(
    cfg: &SimConfig,
    truth: &SimTruth,
    noise_seed: u64,
    exec: Execution,
) -> Result<SimDataset> {
    simulate(cfg, truth.clone(), noise_seed, None, exec)
}

/// Like [`generate_dataset`], with notes entering week by week and ratings
/// spread over each note's lifetime.
pub fn generate_stream(cfg: &SimConfig, stream: &StreamConfig, exec: Execution) -> Result<SimDataset> {
    simulate(cfg, sample_population(cfg)?, cfg.seed, Some(stream), exec)
}
