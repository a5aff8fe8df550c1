//! Closed-form large-sample predictions for fits on conforming raters, and a
//! suite that checks them against simulated fits.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::mf::{self, Clamp, FitConfig, Regularization, WeightVector};
use crate::model::{decenter_note_intercept, LatentParams};
use crate::rng::derive_seed;
use crate::sim::{self, NoiseSpec, RhoFn, SimConfig, SimDataset, SimTruth};
use crate::twostage::{decoded_note_intercepts, two_stage_fit, TwoStageConfig};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rmse: length mismatch");
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

/// Least-squares line `y ≈ intercept + slope·x`.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn slope_through_origin(x: &[f64], y: &[f64]) -> f64 {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    sxy / sxx
}

/// Attenuation slope `w₁ = Σ ρ_n g_n² / Σ g_n²`.
pub fn w1(rho: &[f64], g: &[f64]) -> Result<f64> {
    if rho.len() != g.len() {
        return Err(Error::DimensionMismatch { what: "rho", expected: g.len(), found: rho.len() });
    }
    let den: f64 = g.iter().map(|x| x * x).sum();
    if !(den > 0.0) {
        return Err(Error::Degenerate("w1 is undefined when every note factor is zero".into()));
    }
    Ok(rho.iter().zip(g).map(|(r, x)| r * x * x).sum::<f64>() / den)
}

/// Limit of the fitted note intercepts under conformity,
/// `i_n + c ρ_n g_n + (1 − ρ_n) δ_n − (1 − ρ̄)·mean(δ)`, with `i` and `g`
/// centred over notes and `c = mu_f`.
pub fn predicted_note_limit(truth: &SimTruth) -> Vec<f64> {
    let i = centered(&truth.theta0.i);
    let g = centered(&truth.theta0.g);
    // δ is unchanged when the mean of i moves into μ
    let delta: Vec<f64> = truth
        .m_n
        .iter()
        .zip(&truth.theta0.i)
        .map(|(m, i)| m - (truth.theta0.mu + i))
        .collect();
    let rho_bar = mean(&truth.rho_n);
    let delta_bar = mean(&delta);
    let c = truth.mu_f;
    (0..i.len())
        .map(|n| {
            let rho = truth.rho_n[n];
            i[n] + c * rho * g[n] + (1.0 - rho) * delta[n] - (1.0 - rho_bar) * delta_bar
        })
        .collect()
}

/// Expected fitted rater factor when the note factors are known:
/// `w₁ f_u + c(1 − w₁)` for the decentred estimate, `w₁(f_u − c)` for the
/// centred one.
pub fn predicted_user_factor(f_u: f64, w1: f64, c: f64, decentered: bool) -> f64 {
    if decentered {
        w1 * f_u + c * (1.0 - w1)
    } else {
        w1 * (f_u - c)
    }
}

/// Share of raters whose estimated factor has the minority sign,
/// `F(−c(1 − w₁)/w₁)`.
pub fn predicted_minority_share<F: Fn(f64) -> f64>(cdf: F, c: f64, w1: f64) -> Result<f64> {
    if w1 == 0.0 {
        return Err(Error::Degenerate("w1 = 0: full collapse, every estimate equals c".into()));
    }
    if !(w1 > 0.0 && w1 <= 1.0) {
        return Err(Error::InvalidConfig(format!("w1 = {w1} outside (0, 1]")));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!("c = {c} must be > 0")));
    }
    Ok(cdf(-c * (1.0 - w1) / w1))
}

/// `g_n ρ_n (1 − c Σ f_u / Σ f_u²)`.
pub fn predicted_note_factor(g_n: f64, rho_n: f64, f: &[f64], c: f64) -> Result<f64> {
    let ss: f64 = f.iter().map(|x| x * x).sum();
    if !(ss > 0.0) {
        return Err(Error::Degenerate("rater factors are all zero".into()));
    }
    let s: f64 = f.iter().sum();
    Ok(g_n * rho_n * (1.0 - c * s / ss))
}

/// `Σ w_u² σ_u² / (Σ w_u)²`.
pub fn intercept_variance_formula(w: &[f64], sigma2: &[f64]) -> Result<f64> {
    if w.len() != sigma2.len() {
        return Err(Error::DimensionMismatch { what: "sigma2", expected: w.len(), found: sigma2.len() });
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::Degenerate("weights sum to zero".into()));
    }
    Ok(w.iter().zip(sigma2).map(|(w, s)| w * w * s).sum::<f64>() / (sw * sw))
}

/// Note intercepts of a canonical fit shifted back to the uncentred rater
/// factor of `truth`. The fit's factors are oriented against the truth and
/// the mean factor is converted to canonical units.
pub fn decentered_intercepts(fit: &LatentParams, truth: &SimTruth) -> Result<Vec<f64>> {
    let fc = centered(&truth.theta0.f);
    let scale = (fc.iter().map(|x| x * x).sum::<f64>() / fc.len().max(1) as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::Degenerate("true rater factors are constant".into()));
    }
    let mut oriented = fit.clone().oriented_like(&truth.theta0.f);
    oriented.flip_factors();
    decenter_note_intercept(&oriented.i, &oriented.g, truth.mu_f / scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Truthful,
    Conformity,
    KnownG,
    Heteroskedastic,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Truthful,
        Scenario::Conformity,
        Scenario::KnownG,
        Scenario::Heteroskedastic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Truthful => "truthful",
            Scenario::Conformity => "conformity",
            Scenario::KnownG => "known_g",
            Scenario::Heteroskedastic => "heteroskedastic",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario {s:?}")))
    }
}

/// How a claim row is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `|observed − predicted| ≤ tolerance`.
    Abs,
    /// `|observed − predicted| ≤ tolerance·|predicted|`.
    Rel,
    /// `observed < predicted`.
    Less,
    /// `observed ≤ predicted`.
    AtMost,
    /// `observed ≥ predicted`.
    AtLeast,
}

impl Check {
    pub fn as_str(self) -> &'static str {
        match self {
            Check::Abs => "abs",
            Check::Rel => "rel",
            Check::Less => "less",
            Check::AtMost => "at_most",
            Check::AtLeast => "at_least",
        }
    }

    fn holds(self, predicted: f64, observed: f64, tolerance: f64) -> bool {
        match self {
            Check::Abs => (observed - predicted).abs() <= tolerance,
            Check::Rel => (observed - predicted).abs() <= tolerance * predicted.abs(),
            Check::Less => observed < predicted,
            Check::AtMost => observed <= predicted,
            Check::AtLeast => observed >= predicted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimStatus {
    Pass,
    Fail,
    Skipped,
}

impl ClaimStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ClaimStatus::Pass => "pass",
            ClaimStatus::Fail => "fail",
            ClaimStatus::Skipped => "skipped",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Claim {
    pub scenario: Scenario,
    pub name: String,
    pub check: Check,
    pub predicted: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub status: ClaimStatus,
}

impl Claim {
    pub fn evaluate(
        scenario: Scenario,
        name: impl Into<String>,
        check: Check,
        predicted: f64,
        observed: f64,
        tolerance: f64,
    ) -> Self {
        let ok = predicted.is_finite() && observed.is_finite() && check.holds(predicted, observed, tolerance);
        Self {
            scenario,
            name: name.into(),
            check,
            predicted,
            observed,
            tolerance,
            status: if ok { ClaimStatus::Pass } else { ClaimStatus::Fail },
        }
    }

    pub fn skipped(scenario: Scenario, name: impl Into<String>) -> Self {
        Self {
            scenario,
            name: name.into(),
            check: Check::Abs,
            predicted: f64::NAN,
            observed: f64::NAN,
            tolerance: f64::NAN,
            status: ClaimStatus::Skipped,
        }
    }

    /// `|observed − predicted|`.
    pub fn deviation(&self) -> f64 {
        (self.observed - self.predicted).abs()
    }
}

/// Predicted and fitted intercept of one note in the conformity scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteLimitRow {
    pub note: String,
    pub predicted: f64,
    pub observed: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TheoryReport {
    pub claims: Vec<Claim>,
    pub notes: Vec<NoteLimitRow>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.claims.iter().all(|c| c.status != ClaimStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Claim> {
        self.claims.iter().filter(|c| c.status == ClaimStatus::Fail)
    }

    pub fn claim(&self, name: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.name == name)
    }

    /// Largest absolute and root-mean-square deviation per scenario, over
    /// evaluated rows.
    pub fn deviations(&self) -> Vec<(Scenario, f64, f64)> {
        Scenario::ALL
            .into_iter()
            .filter_map(|s| {
                let d: Vec<f64> = self
                    .claims
                    .iter()
                    .filter(|c| c.scenario == s && c.status != ClaimStatus::Skipped)
                    .map(Claim::deviation)
                    .collect();
                if d.is_empty() {
                    return None;
                }
                let max = d.iter().fold(0.0f64, |m, x| m.max(*x));
                let rms = (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt();
                Some((s, max, rms))
            })
            .collect()
    }
}

/// Sizes, seeds and tolerances of the theory suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(skip)]
    pub seed: u64,
    /// Seeds averaged for the truthful and known-g rows.
    pub seeds: usize,
    pub truthful_size: usize,
    pub truthful_small: usize,
    pub truthful_large: usize,
    pub truthful_p: f64,
    pub truthful_sigma: f64,
    pub conformity_size: usize,
    pub conformity_sigma: f64,
    pub kappa: f64,
    pub clamp_size: usize,
    pub clamp_lambda: f64,
    pub share_users: usize,
    pub share_notes: usize,
    pub kappa_grid: Vec<f64>,
    pub hetero_size: usize,
    pub hetero_replicates: usize,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub tol_abs: f64,
    pub tol_share: f64,
    pub tol_rel: f64,
    /// Negative control: predict the rater-factor slope as `w₁²`.
    pub wrong_formula: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 10,
            truthful_size: 300,
            truthful_small: 150,
            truthful_large: 600,
            truthful_p: 0.3,
            truthful_sigma: 0.1,
            conformity_size: 500,
            conformity_sigma: 0.05,
            kappa: 0.8,
            clamp_size: 500,
            clamp_lambda: 1e-3,
            share_users: 2000,
            share_notes: 300,
            kappa_grid: vec![0.8, 0.6, 0.4, 0.2],
            hetero_size: 200,
            hetero_replicates: 400,
            sigma_lo: 0.05,
            sigma_hi: 0.5,
            tol_abs: 0.05,
            tol_share: 0.03,
            tol_rel: 0.2,
            wrong_formula: false,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.seeds,
            self.truthful_size,
            self.truthful_small,
            self.truthful_large,
            self.conformity_size,
            self.clamp_size,
            self.share_users,
            self.share_notes,
            self.hetero_size,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("theory sizes and seed count must be positive".into()));
        }
        if self.hetero_replicates < 2 {
            return Err(Error::InvalidConfig("hetero_replicates must be >= 2".into()));
        }
        if self.truthful_small >= self.truthful_large {
            return Err(Error::InvalidConfig("truthful_small must be below truthful_large".into()));
        }
        if self.kappa_grid.is_empty() {
            return Err(Error::InvalidConfig("kappa_grid must not be empty".into()));
        }
        for k in self.kappa_grid.iter().chain([&self.kappa]) {
            if !(0.0..1.0).contains(k) {
                return Err(Error::InvalidConfig(format!("kappa {k} outside [0, 1)")));
            }
        }
        if !(self.clamp_lambda >= 0.0) {
            return Err(Error::InvalidConfig("clamp_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

struct Suite<'a> {
    base: &'a SimConfig,
    cfg: &'a TheoryConfig,
    exec: Execution,
}

impl Suite<'_> {
    fn sim(&self, users: usize, notes: usize, p: f64, noise: NoiseSpec, rho: RhoFn, seed: u64) -> SimConfig {
        SimConfig {
            num_users: users,
            num_notes: notes,
            p,
            sigma_eps: noise,
            rho_fn: rho,
            discretize: false,
            seed,
            ..self.base.clone()
        }
    }

    fn dataset(&self, cfg: &SimConfig) -> Result<(SimDataset, SimTruth)> {
        let ds = sim::generate_dataset_with(cfg, self.exec)?;
        let truth = ds.truth.aligned_to(&ds.observations)?;
        Ok((ds, truth))
    }

    fn fit_cfg(&self, seed: u64) -> FitConfig {
        FitConfig { seed, execution: self.exec, ..FitConfig::default() }
    }

    fn clamp_cfg(&self, seed: u64) -> FitConfig {
        self.fit_cfg(seed).with_regularization(Regularization::uniform(self.cfg.clamp_lambda))
    }

    fn seed(&self, tag: &str, k: usize) -> u64 {
        derive_seed(self.cfg.seed, &format!("{tag}-{k}"))
    }

    fn truthful_rmse(&self, size: usize, k: usize) -> Result<f64> {
        let c = self.cfg;
        let cfg = self.sim(
            size,
            size,
            c.truthful_p,
            NoiseSpec::Constant { sigma: c.truthful_sigma },
            RhoFn::truthful(),
            self.seed(&format!("truthful-{size}"), k),
        );
        let (ds, truth) = self.dataset(&cfg)?;
        let fit = mf::fit(&ds.observations, &self.fit_cfg(cfg.seed), None)?;
        let dec = decentered_intercepts(&fit.params, &truth)?;
        Ok(rmse(&dec, &centered(&truth.theta0.i)))
    }

    fn truthful(&self, out: &mut TheoryReport) -> Result<()> {
        let c = self.cfg;
        let s = Scenario::Truthful;
        let avg = |size: usize| -> Result<f64> {
            let v = (0..c.seeds).map(|k| self.truthful_rmse(size, k)).collect::<Result<Vec<_>>>()?;
            Ok(mean(&v))
        };
        out.claims.push(Claim::evaluate(s, "truthful.intercept_rmse", Check::Abs, 0.0, avg(c.truthful_size)?, c.tol_abs));
        let small = avg(c.truthful_small)?;
        let large = avg(c.truthful_large)?;
        out.claims.push(Claim::evaluate(s, "truthful.rmse_decreases_with_size", Check::Less, small, large, 0.0));

        let cfg = self.sim(
            c.truthful_size,
            c.truthful_size,
            c.truthful_p,
            NoiseSpec::Constant { sigma: c.truthful_sigma },
            RhoFn::truthful(),
            self.seed("truthful-limit", 0),
        );
        let (ds, truth) = self.dataset(&cfg)?;
        let fit = mf::fit(&ds.observations, &self.fit_cfg(cfg.seed), None)?;
        let limit = predicted_note_limit(&truth);
        out.claims.push(Claim::evaluate(s, "truthful.note_limit_rmse", Check::Abs, 0.0, rmse(&fit.params.i, &limit), c.tol_abs));
        Ok(())
    }

    fn conformity(&self, out: &mut TheoryReport) -> Result<()> {
        let c = self.cfg;
        let s = Scenario::Conformity;
        let cfg = self.sim(
            c.conformity_size,
            c.conformity_size,
            1.0,
            NoiseSpec::Constant { sigma: c.conformity_sigma },
            RhoFn::Linear { kappa: c.kappa },
            self.seed("conformity", 0),
        );
        let (ds, truth) = self.dataset(&cfg)?;
        let fit = mf::fit(&ds.observations, &self.fit_cfg(cfg.seed), None)?;
        let limit = predicted_note_limit(&truth);
        let i_true = centered(&truth.theta0.i);
        let dev = rmse(&fit.params.i, &limit);
        let bias = rmse(&fit.params.i, &i_true);
        out.claims.push(Claim::evaluate(s, "conformity.note_limit_rmse", Check::Abs, 0.0, dev, c.tol_abs));
        out.claims.push(Claim::evaluate(s, "conformity.bias_vs_truth", Check::AtLeast, 2.0 * dev, bias, 0.0));
        out.claims.push(Claim::skipped(s, "conformity.truthful_consistency"));
        out.notes = ds
            .observations
            .note_ids()
            .iter()
            .enumerate()
            .map(|(n, id)| NoteLimitRow {
                note: id.clone(),
                predicted: limit[n],
                observed: fit.params.i[n],
                truth: i_true[n],
            })
            .collect();
        Ok(())
    }

    /// Fit with `g` clamped at the truth; returns the decentred rater factors.
    fn clamped_user_factors(&self, cfg: &SimConfig) -> Result<(Vec<f64>, SimTruth)> {
        let (ds, truth) = self.dataset(cfg)?;
        let res = mf::fit_clamped(
            &ds.observations,
            &self.clamp_cfg(cfg.seed),
            None,
            &Clamp::NoteFactors(truth.theta0.g.clone()),
        )?;
        let f0 = centered(&res.params.f).into_iter().map(|x| x + truth.mu_f).collect();
        Ok((f0, truth))
    }

    fn known_g(&self, out: &mut TheoryReport) -> Result<()> {
        let c = self.cfg;
        let s = Scenario::KnownG;
        let noise = NoiseSpec::Constant { sigma: c.conformity_sigma };
        let rho = RhoFn::Linear { kappa: c.kappa };

        let mut slopes = Vec::new();
        let mut intercepts = Vec::new();
        let mut predicted_slope = Vec::new();
        let mut predicted_intercept = Vec::new();
        for k in 0..c.seeds {
            let cfg = self.sim(c.clamp_size, c.clamp_size, 1.0, noise.clone(), rho.clone(), self.seed("known-g", k));
            let (f0, truth) = self.clamped_user_factors(&cfg)?;
            let (b, a) = ols(&truth.theta0.f, &f0);
            let w = w1(&truth.rho_n, &truth.theta0.g)?;
            slopes.push(b);
            intercepts.push(a);
            predicted_slope.push(if c.wrong_formula { w * w } else { w });
            predicted_intercept.push(predicted_user_factor(0.0, w, truth.mu_f, true));
        }
        out.claims.push(Claim::evaluate(s, "known_g.user_factor_slope", Check::Abs, mean(&predicted_slope), mean(&slopes), c.tol_abs));
        out.claims.push(Claim::evaluate(
            s,
            "known_g.user_factor_intercept",
            Check::Abs,
            mean(&predicted_intercept),
            mean(&intercepts),
            c.tol_abs,
        ));

        // minority share over the kappa grid, one population
        let mut points = Vec::new();
        for (k, &kappa) in c.kappa_grid.iter().enumerate() {
            let cfg = self.sim(
                c.share_users,
                c.share_notes,
                1.0,
                noise.clone(),
                RhoFn::Linear { kappa },
                self.seed("share", 0),
            );
            let (f0, truth) = self.clamped_user_factors(&cfg)?;
            let f = &truth.theta0.f;
            let ecdf = |x: f64| f.iter().filter(|&&v| v <= x).count() as f64 / f.len() as f64;
            let w = w1(&truth.rho_n, &truth.theta0.g)?;
            let predicted = predicted_minority_share(ecdf, truth.mu_f, w)?;
            let observed = f0.iter().filter(|&&v| v < 0.0).count() as f64 / f0.len() as f64;
            let true_share = f.iter().filter(|&&v| v < 0.0).count() as f64 / f.len() as f64;
            out.claims.push(Claim::evaluate(
                s,
                format!("known_g.minority_share[{k}]"),
                Check::Abs,
                predicted,
                observed,
                c.tol_share,
            ));
            out.claims.push(Claim::evaluate(
                s,
                format!("known_g.minority_below_true[{k}]"),
                Check::Less,
                true_share,
                observed,
                0.0,
            ));
            points.push((w, observed));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let worst_drop = points.windows(2).map(|p| p[0].1 - p[1].1).fold(0.0f64, f64::max);
        out.claims.push(Claim::evaluate(s, "known_g.minority_share_monotone", Check::AtMost, 0.0, worst_drop, 0.0));

        // note factors with rater factors clamped at the centred truth
        let cfg = self.sim(c.clamp_size, c.clamp_size, 1.0, noise, rho, self.seed("known-f", 0));
        let (ds, truth) = self.dataset(&cfg)?;
        let fc = centered(&truth.theta0.f);
        let res = mf::fit_clamped(&ds.observations, &self.clamp_cfg(cfg.seed), None, &Clamp::UserFactors(fc.clone()))?;
        let g_hat = &res.params.g;
        let predicted: Vec<f64> = (0..g_hat.len())
            .map(|n| predicted_note_factor(truth.theta0.g[n], truth.rho_n[n], &fc, truth.mu_f))
            .collect::<Result<_>>()?;
        out.claims.push(Claim::evaluate(
            s,
            "known_g.note_factor_slope",
            Check::Abs,
            1.0,
            slope_through_origin(&predicted, g_hat),
            c.tol_abs,
        ));
        let median_c = {
            let mut v = truth.c_n.clone();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let half = |high: bool| {
            let idx: Vec<usize> = (0..g_hat.len()).filter(|&n| (truth.c_n[n] >= median_c) == high).collect();
            let g: Vec<f64> = idx.iter().map(|&n| truth.theta0.g[n]).collect();
            let gh: Vec<f64> = idx.iter().map(|&n| g_hat[n]).collect();
            let rho: Vec<f64> = idx.iter().map(|&n| truth.rho_n[n]).collect();
            (slope_through_origin(&g, &gh), w1(&rho, &g))
        };
        let (obs_hi, w_hi) = half(true);
        let (obs_lo, w_lo) = half(false);
        out.claims.push(Claim::evaluate(
            s,
            "known_g.note_factor_shrink_ratio",
            Check::Abs,
            w_hi? / w_lo?,
            obs_hi / obs_lo,
            c.tol_abs,
        ));
        Ok(())
    }

    fn heteroskedastic(&self, out: &mut TheoryReport) -> Result<()> {
        let c = self.cfg;
        let s = Scenario::Heteroskedastic;
        let cfg = self.sim(
            c.hetero_size,
            c.hetero_size,
            1.0,
            NoiseSpec::TwoGroup { sigma_lo: c.sigma_lo, sigma_hi: c.sigma_hi, fraction: 0.5 },
            RhoFn::truthful(),
            self.seed("hetero", 0),
        );
        let truth = sim::sample_population(&cfg)?;
        let sigma2: Vec<f64> = truth.sigma_u.iter().map(|s| s * s).collect();
        let families: [(&str, Vec<f64>); 3] = [
            ("uniform", vec![1.0; sigma2.len()]),
            ("inverse_sigma", truth.sigma_u.iter().map(|s| 1.0 / s).collect()),
            ("inverse_variance", sigma2.iter().map(|s| 1.0 / s).collect()),
        ];
        let inner = Execution::Sequential;
        // per replicate: decoded coordinate under each fixed family, then two-stage
        let runs = exec::map_range(self.exec, c.hetero_replicates, |r| -> Result<Vec<f64>> {
            let ds = sim::generate_for_truth(&cfg, &truth, self.seed("hetero-noise", r), inner)?;
            let obs = &ds.observations;
            let note = obs
                .note_index(&sim::note_id(0))
                .ok_or_else(|| Error::Degenerate("note 0 unobserved".into()))?;
            let users = obs
                .user_ids()
                .iter()
                .map(|id| sim::parse_user_id(id).ok_or_else(|| Error::Degenerate(format!("bad rater id {id}"))))
                .collect::<Result<Vec<_>>>()?;
            let fit_cfg = FitConfig { seed: cfg.seed, execution: inner, ..FitConfig::default() };
            let mut row = Vec::with_capacity(families.len() + 1);
            for (_, w) in &families {
                let w: Vec<f64> = users.iter().map(|&u| w[u]).collect();
                let mean_w = mean(&w);
                let wv = WeightVector::new(w.iter().map(|x| x / mean_w).collect())?;
                let fit = mf::fit(obs, &fit_cfg, Some(&wv))?;
                row.push(decoded_note_intercepts(&fit.params, &w)?[note]);
            }
            let ts = two_stage_fit(obs, &fit_cfg, &TwoStageConfig::default())?;
            row.push(decoded_note_intercepts(ts.theta_ts(), ts.weights.as_slice())?[note]);
            Ok(row)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let var = |k: usize| {
            let xs: Vec<f64> = runs.iter().map(|r| r[k]).collect();
            let m = mean(&xs);
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let observed: Vec<f64> = (0..=families.len()).map(var).collect();
        for (k, (name, w)) in families.iter().enumerate() {
            out.claims.push(Claim::evaluate(
                s,
                format!("heteroskedastic.variance_{name}"),
                Check::Rel,
                intercept_variance_formula(w, &sigma2)?,
                observed[k],
                c.tol_rel,
            ));
        }
        let iv = observed[2];
        out.claims.push(Claim::evaluate(s, "heteroskedastic.inverse_variance_below_uniform", Check::AtMost, observed[0], iv, 0.0));
        out.claims.push(Claim::evaluate(s, "heteroskedastic.inverse_variance_below_inverse_sigma", Check::AtMost, observed[1], iv, 0.0));
        out.claims.push(Claim::evaluate(s, "heteroskedastic.two_stage_below_uniform", Check::AtMost, observed[0], observed[3], 0.0));
        Ok(())
    }
}

/// Runs the selected scenarios and collects every claim row.
pub fn run_theory_suite(
    base: &SimConfig,
    cfg: &TheoryConfig,
    scenarios: &[Scenario],
    exec: Execution,
) -> Result<TheoryReport> {
    base.validate()?;
    cfg.validate()?;
    let suite = Suite { base, cfg, exec };
    let mut report = TheoryReport::default();
    for s in Scenario::ALL.into_iter().filter(|s| scenarios.contains(s)) {
        match s {
            Scenario::Truthful => suite.truthful(&mut report)?,
            Scenario::Conformity => suite.conformity(&mut report)?,
            Scenario::KnownG => suite.known_g(&mut report)?,
            Scenario::Heteroskedastic => suite.heteroskedastic(&mut report)?,
        }
    }
    Ok(report)
}
