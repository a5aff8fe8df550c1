//! Descriptive statistics and tests: rank correlation, bimodality,
//! shrunk proportions, gap regressions with HAC errors, two-way fixed
//! effects and permutation tests.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::rng::substream;

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Average ranks, 1-based; ties share the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[k]] {
            j += 1;
        }
        let r = (k + j) as f64 / 2.0 + 1.0;
        for &t in &idx[k..=j] {
            ranks[t] = r;
        }
        k = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { what: "spearman inputs", expected: x.len(), found: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("spearman needs at least 2 pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("spearman inputs must be finite".into()));
    }
    pearson(&mid_ranks(x), &mid_ranks(y)).ok_or_else(|| Error::Degenerate("degenerate ranks".into()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kurtosis {
    /// Population moments; a Gaussian gives 3.
    #[default]
    Raw,
    /// Small-sample adjusted skewness and kurtosis.
    SampleCorrected,
}

/// `(skewness² + 1) / kurtosis` with raw moments.
pub fn bimodality_coefficient(x: &[f64]) -> Result<f64> {
    bimodality_coefficient_with(x, Kurtosis::Raw)
}

pub fn bimodality_coefficient_with(x: &[f64], kurtosis: Kurtosis) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::Degenerate("bimodality coefficient needs at least 4 values".into()));
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if !(m2 > 0.0) || !m2.is_finite() {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2);
    Ok(match kurtosis {
        Kurtosis::Raw => (g1 * g1 + 1.0) / g2,
        Kurtosis::SampleCorrected => {
            let skew = g1 * (n * (n - 1.0)).sqrt() / (n - 2.0);
            let excess = ((n + 1.0) * (g2 - 3.0) + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0));
            (skew * skew + 1.0) / (excess + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
        }
    })
}

/// `(k + 0.5) / (n + 1)`.
pub fn jeffreys_proportion(k: u64, n: u64) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidConfig(format!("count {k} exceeds total {n}")));
    }
    Ok((k as f64 + 0.5) / (n as f64 + 1.0))
}

fn two_sided_normal_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * std.cdf(-z.abs())).min(1.0)
}

/// Coefficient of interest with a normal-theory interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub beta: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub p: f64,
    pub n: usize,
}

impl Estimate {
    fn new(beta: f64, se: f64, n: usize) -> Self {
        let p = if se > 0.0 {
            two_sided_normal_p(beta / se)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        };
        Estimate { beta, se, ci: (beta - Z_95 * se, beta + Z_95 * se), p, n }
    }
}

/// Regression of weekly gaps on a post indicator, optionally with a running
/// variable (and its interaction with post) for local-linear designs.
#[derive(Clone, Debug, Default)]
pub struct GapRegression<'a> {
    pub gaps: &'a [f64],
    pub post: &'a [bool],
    pub weights: Option<&'a [f64]>,
    pub hac_lags: usize,
    pub running: Option<&'a [f64]>,
    /// Add `post × running` as well.
    pub interacted: bool,
}

pub const DEFAULT_HAC_LAGS: usize = 4;

/// Level shift `β` in `d_w = α + β·post_w + ε_w`, weighted least squares
/// with a Newey–West (Bartlett) standard error.
pub fn weekly_gap_did(gaps: &[f64], post: &[bool], weights: Option<&[f64]>, hac_lags: usize) -> Result<Estimate> {
    gap_regression(&GapRegression { gaps, post, weights, hac_lags, running: None, interacted: false })
}

pub fn gap_regression(spec: &GapRegression<'_>) -> Result<Estimate> {
    let t = spec.gaps.len();
    if spec.post.len() != t {
        return Err(Error::DimensionMismatch { what: "post flags", expected: t, found: spec.post.len() });
    }
    if let Some(w) = spec.weights {
        if w.len() != t {
            return Err(Error::DimensionMismatch { what: "weights", expected: t, found: w.len() });
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("weights must be finite and positive".into()));
        }
    }
    if let Some(r) = spec.running {
        if r.len() != t {
            return Err(Error::DimensionMismatch { what: "running variable", expected: t, found: r.len() });
        }
    }
    if spec.gaps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("gaps must be finite".into()));
    }
    let n_post = spec.post.iter().filter(|&&p| p).count();
    if n_post == 0 || n_post == t {
        return Err(Error::Degenerate("both pre and post weeks are required".into()));
    }
    let mut cols: Vec<Box<dyn Fn(usize) -> f64 + '_>> = vec![
        Box::new(|_| 1.0),
        Box::new(|k| f64::from(u8::from(spec.post[k]))),
    ];
    if let Some(r) = spec.running {
        cols.push(Box::new(move |k| r[k]));
        if spec.interacted {
            cols.push(Box::new(move |k| r[k] * f64::from(u8::from(spec.post[k]))));
        }
    }
    let p = cols.len();
    if t <= p {
        return Err(Error::Degenerate(format!("{t} weeks for {p} coefficients")));
    }
    let sw = |k: usize| spec.weights.map_or(1.0, |w| w[k].sqrt());
    let x = DMatrix::from_fn(t, p, |k, j| sw(k) * cols[j](k));
    let y = DVector::from_fn(t, |k, _| sw(k) * spec.gaps[k]);
    let xtx = x.transpose() * &x;
    let bread = xtx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Degenerate("collinear design".into()))?;
    let beta = &bread * (x.transpose() * &y);
    let e = &y - &x * &beta;
    let scores = DMatrix::from_fn(t, p, |k, j| x[(k, j)] * e[k]);
    let mut meat = scores.transpose() * &scores;
    for lag in 1..=spec.hac_lags.min(t - 1) {
        let kw = 1.0 - lag as f64 / (spec.hac_lags as f64 + 1.0);
        let a = scores.rows(lag, t - lag);
        let b = scores.rows(0, t - lag);
        let g = a.transpose() * b;
        meat += (&g + g.transpose()) * kw;
    }
    let v = &bread * meat * &bread;
    Ok(Estimate::new(beta[1], v[(1, 1)].max(0.0).sqrt(), t))
}

/// One observation of a unit in a week.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelCell {
    pub unit: String,
    pub week: i64,
    pub outcome: f64,
    /// Treatment group membership, e.g. minority raters.
    pub group: bool,
    pub post: bool,
}

const DEMEAN_TOL: f64 = 1e-13;
const DEMEAN_MAX_ITER: usize = 10_000;

fn demean(v: &mut [f64], unit: &[usize], week: &[usize], nu: usize, nw: usize) {
    let mut cu = vec![0usize; nu];
    let mut cw = vec![0usize; nw];
    for k in 0..v.len() {
        cu[unit[k]] += 1;
        cw[week[k]] += 1;
    }
    let scale = v.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    for _ in 0..DEMEAN_MAX_ITER {
        let mut change = 0.0f64;
        for (idx, counts) in [(unit, &cu), (week, &cw)] {
            let mut sums = vec![0.0; counts.len()];
            for k in 0..v.len() {
                sums[idx[k]] += v[k];
            }
            for k in 0..v.len() {
                let m = sums[idx[k]] / counts[idx[k]] as f64;
                v[k] -= m;
                change = change.max(m.abs());
            }
        }
        if change <= DEMEAN_TOL * scale {
            break;
        }
    }
}

/// Coefficient on `group × post` with unit and week fixed effects, by
/// alternating demeaning, with an HC1 standard error.
pub fn two_way_fe_did(panel: &[PanelCell]) -> Result<Estimate> {
    let mut units = HashMap::new();
    let mut weeks = HashMap::new();
    let mut seen = HashSet::new();
    let mut ui = Vec::with_capacity(panel.len());
    let mut wi = Vec::with_capacity(panel.len());
    for c in panel {
        if !c.outcome.is_finite() {
            return Err(Error::Degenerate(format!("non-finite outcome for unit {} week {}", c.unit, c.week)));
        }
        if !seen.insert((c.unit.as_str(), c.week)) {
            return Err(Error::InvalidConfig(format!("duplicate cell for unit {} week {}", c.unit, c.week)));
        }
        let nu = units.len();
        ui.push(*units.entry(c.unit.as_str()).or_insert(nu));
        let nw = weeks.len();
        wi.push(*weeks.entry(c.week).or_insert(nw));
    }
    let (nu, nw) = (units.len(), weeks.len());
    if nu < 2 || nw < 2 {
        return Err(Error::Degenerate(format!("panel needs at least 2 units and 2 weeks, found {nu} and {nw}")));
    }
    let n = panel.len();
    let mut y: Vec<f64> = panel.iter().map(|c| c.outcome).collect();
    let mut d: Vec<f64> = panel.iter().map(|c| f64::from(u8::from(c.group && c.post))).collect();
    let d_raw: f64 = d.iter().sum();
    demean(&mut y, &ui, &wi, nu, nw);
    demean(&mut d, &ui, &wi, nu, nw);
    let sdd: f64 = d.iter().map(|v| v * v).sum();
    if d_raw == 0.0 || sdd <= 1e-10 * d_raw {
        return Err(Error::Degenerate("collinear design: interaction is absorbed by the fixed effects".into()));
    }
    let beta = d.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sdd;
    let k = nu + nw;
    if n <= k {
        return Err(Error::Degenerate(format!("{n} cells for {k} parameters")));
    }
    let meat: f64 = d.iter().zip(&y).map(|(a, b)| (a * (b - beta * a)).powi(2)).sum();
    let var = meat / (sdd * sdd) * n as f64 / (n - k) as f64;
    Ok(Estimate::new(beta, var.sqrt(), n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationResult {
    pub p: f64,
    pub observed: f64,
    pub n_perm: usize,
    /// Permutations at least as extreme as the observed statistic.
    pub exceed: usize,
    pub degenerate: bool,
}

pub const MIN_PERMUTATIONS: usize = 100;

/// Mean of the `true` group minus mean of the `false` group.
pub fn difference_in_means(data: &[f64], labels: &[bool]) -> f64 {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (x, &l) in data.iter().zip(labels) {
        if l {
            s1 += x;
            n1 += 1;
        } else {
            s0 += x;
            n0 += 1;
        }
    }
    s1 / n1 as f64 - s0 / n0 as f64
}

/// Two-sided permutation test with add-one smoothing. Each replicate
/// shuffles the labels with its own random stream, so group sizes are kept
/// and the result depends only on `seed`.
pub fn permutation_test<F>(
    stat: F,
    data: &[f64],
    labels: &[bool],
    n_perm: usize,
    seed: u64,
    exec: Execution,
) -> Result<PermutationResult>
where
    F: Fn(&[f64], &[bool]) -> f64 + Sync + Send,
{
    if data.len() != labels.len() {
        return Err(Error::DimensionMismatch { what: "labels", expected: data.len(), found: labels.len() });
    }
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::InvalidConfig(format!("n_perm = {n_perm} is below {MIN_PERMUTATIONS}")));
    }
    let observed = stat(data, labels);
    let perms = map_range(exec, n_perm, |r| {
        let mut rng = substream(seed, "perm", r as u64);
        let mut l = labels.to_vec();
        l.shuffle(&mut rng);
        stat(data, &l)
    });
    let degenerate = !observed.is_finite()
        || perms.iter().all(|v| !v.is_finite())
        || perms.iter().all(|&v| v == observed);
    if degenerate {
        log::warn!("permutation statistic is degenerate; reporting p = 1");
        return Ok(PermutationResult { p: 1.0, observed, n_perm, exceed: n_perm, degenerate });
    }
    let bar = observed.abs() * (1.0 - 1e-12);
    let exceed = perms.iter().filter(|v| v.abs() >= bar).count();
    Ok(PermutationResult {
        p: (1 + exceed) as f64 / (1 + n_perm) as f64,
        observed,
        n_perm,
        exceed,
        degenerate,
    })
}
