//! Two-stage weighted factorisation: fit, estimate each rater's residual
//! variance, and refit with inverse-variance weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mf::{self, filter_observations, FilterThresholds, FitConfig, FitResult, Init, WeightVector};
use crate::model::{LatentParams, ObservationSet};

pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-4;

/// First-stage residual `e_un = r_un − r̂_un` for every observed pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTable {
    pub entries: Vec<(u32, u32, f64)>,
    pub per_user_counts: Vec<usize>,
}

pub fn compute_residuals(obs: &ObservationSet, theta: &LatentParams) -> Result<ResidualTable> {
    if theta.num_users() != obs.num_users() {
        return Err(Error::DimensionMismatch {
            what: "parameters (raters)",
            expected: obs.num_users(),
            found: theta.num_users(),
        });
    }
    if theta.num_notes() != obs.num_notes() {
        return Err(Error::DimensionMismatch {
            what: "parameters (notes)",
            expected: obs.num_notes(),
            found: theta.num_notes(),
        });
    }
    let entries = obs
        .entries()
        .iter()
        .map(|e| {
            let r = e.value - theta.predict(e.user as usize, e.note as usize);
            (e.user, e.note, r)
        })
        .collect();
    Ok(ResidualTable {
        entries,
        per_user_counts: obs.user_counts(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceConvention {
    /// `(1/N_u) Σ e²`.
    #[default]
    MeanSquare,
    /// Mean-centred with an `N_u − 1` denominator.
    SampleVariance,
}

/// Per-rater residual variance; `None` marks raters without enough residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct UserVariance {
    pub sigma2: Vec<Option<f64>>,
}

impl UserVariance {
    pub fn absent(&self) -> usize {
        self.sigma2.iter().filter(|s| s.is_none()).count()
    }
}

pub fn estimate_user_variance(res: &ResidualTable, convention: VarianceConvention) -> UserVariance {
    let nu = res.per_user_counts.len();
    let mut n = vec![0usize; nu];
    let mut s1 = vec![0.0; nu];
    let mut s2 = vec![0.0; nu];
    for &(u, _, e) in &res.entries {
        let u = u as usize;
        n[u] += 1;
        s1[u] += e;
        s2[u] += e * e;
    }
    let sigma2 = (0..nu)
        .map(|u| match convention {
            VarianceConvention::MeanSquare if n[u] >= 1 => Some(s2[u] / n[u] as f64),
            VarianceConvention::SampleVariance if n[u] >= 2 => {
                let m = s1[u] / n[u] as f64;
                Some(((s2[u] - n[u] as f64 * m * m) / (n[u] - 1) as f64).max(0.0))
            }
            _ => None,
        })
        .collect();
    UserVariance { sigma2 }
}

/// `w_u = 1 / max(σ̂_u², floor)`. Raters without a variance estimate receive
/// the pooled mean of the available (floored) variances.
pub fn weights_from_variance(v: &UserVariance, floor: f64) -> Result<WeightVector> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidConfig(format!("weight floor must be > 0, got {floor}")));
    }
    let present: Vec<f64> = v.sigma2.iter().flatten().map(|&s| s.max(floor)).collect();
    let pooled = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    WeightVector::new(
        v.sigma2
            .iter()
            .map(|s| 1.0 / s.map_or(pooled, |s| s.max(floor)))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub variance: VarianceConvention,
    pub floor: f64,
    /// Number of weighted refits; 1 is the plain two-stage estimator.
    pub max_reweight_rounds: usize,
    /// Stop reweighting once `max_u |Δw_u| / w_u` falls below this.
    pub reweight_tol: f64,
    /// Apply the activity filter before fitting.
    #[serde(skip)]
    pub auto_filter: Option<FilterThresholds>,
    /// Rescale weights to mean 1 inside the weighted fit, which keeps the
    /// ridge penalties on the same footing as the unweighted first stage.
    pub normalize_weights: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            variance: VarianceConvention::MeanSquare,
            floor: DEFAULT_WEIGHT_FLOOR,
            max_reweight_rounds: 1,
            reweight_tol: 1e-3,
            auto_filter: None,
            normalize_weights: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageFit {
    /// The observations actually fitted (after the optional filter).
    pub observations: ObservationSet,
    pub stage1: FitResult,
    pub second: FitResult,
    pub weights: WeightVector,
    pub variance: UserVariance,
    pub rounds: usize,
    pub warnings: Vec<String>,
}

impl TwoStageFit {
    pub fn theta_ts(&self) -> &LatentParams {
        &self.second.params
    }

    pub fn stage1_params(&self) -> &LatentParams {
        &self.stage1.params
    }
}

fn weights_for(
    obs: &ObservationSet,
    theta: &LatentParams,
    ts: &TwoStageConfig,
) -> Result<(UserVariance, WeightVector)> {
    let res = compute_residuals(obs, theta)?;
    let var = estimate_user_variance(&res, ts.variance);
    let w = weights_from_variance(&var, ts.floor)?;
    Ok((var, w))
}

/// Unweighted fit, inverse residual-variance weights, weighted refit warm
/// started from the first stage.
pub fn two_stage_fit(
    obs: &ObservationSet,
    cfg: &FitConfig,
    ts: &TwoStageConfig,
) -> Result<TwoStageFit> {
    if ts.max_reweight_rounds == 0 {
        return Err(Error::InvalidConfig("max_reweight_rounds must be >= 1".into()));
    }
    let observations = match ts.auto_filter {
        Some(th) => filter_observations(obs, th),
        None => obs.clone(),
    };
    let stage1 = mf::fit(&observations, cfg, None)?;
    let mut warnings = Vec::new();
    let (mut variance, mut weights) = weights_for(&observations, &stage1.params, ts)?;
    if variance.absent() > 0 {
        warnings.push(format!(
            "{} raters have no variance estimate and use the pooled variance",
            variance.absent()
        ));
    }
    if variance.sigma2.iter().flatten().all(|&s| s <= ts.floor) {
        warnings.push("every rater variance is at the floor; weights are uniform".into());
    }
    let mut prev = stage1.params.clone();
    let mut second;
    let mut rounds = 0;
    loop {
        rounds += 1;
        let w = weights.as_slice();
        second = if ts.normalize_weights && w.iter().all(|&x| x == w[0]) {
            stage1.clone()
        } else {
            let fit_w = if ts.normalize_weights {
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                weights.scaled(1.0 / mean)?
            } else {
                weights.clone()
            };
            let c = cfg.clone().with_init(Init::WarmStart(prev));
            mf::fit(&observations, &c, Some(&fit_w))?
        };
        if rounds >= ts.max_reweight_rounds {
            break;
        }
        let (v, w) = weights_for(&observations, &second.params, ts)?;
        let change = w
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(a, b)| (a - b).abs() / b)
            .fold(0.0, f64::max);
        variance = v;
        weights = w;
        prev = second.params.clone();
        if change < ts.reweight_tol {
            break;
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(TwoStageFit {
        observations,
        stage1,
        second,
        weights,
        variance,
        rounds,
        warnings,
    })
}

/// Weighted decoding of note intercepts from the fitted matrix:
/// `î_n = Σ_u w_u ŝ_un / Σ_u w_u`, centred over notes.
pub fn decoded_note_intercepts(theta: &LatentParams, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != theta.num_users() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: theta.num_users(),
            found: weights.len(),
        });
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Degenerate("weights sum to zero".into()));
    }
    let fw = weights.iter().zip(&theta.f).map(|(w, f)| w * f).sum::<f64>() / wsum;
    let col: Vec<f64> = theta.i.iter().zip(&theta.g).map(|(i, g)| i + fw * g).collect();
    let m = col.iter().sum::<f64>() / col.len().max(1) as f64;
    Ok(col.into_iter().map(|x| x - m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(res: &[f64]) -> ResidualTable {
        ResidualTable {
            entries: res.iter().enumerate().map(|(k, &e)| (0, k as u32, e)).collect(),
            per_user_counts: vec![res.len()],
        }
    }

    #[test]
    fn residual_examples() {
        let obs = ObservationSet::from_triples([("a", "x", 1.0)]).unwrap();
        let mut t = LatentParams::zeros(1, 1);
        t.mu = 0.25;
        let r = compute_residuals(&obs, &t).unwrap();
        assert_eq!(r.entries, vec![(0, 0, 0.75)]);
        assert_eq!(r.per_user_counts, vec![1]);
        assert!(compute_residuals(&obs, &LatentParams::zeros(2, 1)).is_err());
    }

    #[test]
    fn variance_conventions() {
        let t = table(&[1.0, -1.0]);
        assert_eq!(estimate_user_variance(&t, VarianceConvention::MeanSquare).sigma2, vec![Some(1.0)]);
        assert_eq!(
            estimate_user_variance(&t, VarianceConvention::SampleVariance).sigma2,
            vec![Some(2.0)]
        );
        let z = table(&[0.0, 0.0, 0.0]);
        assert_eq!(estimate_user_variance(&z, VarianceConvention::MeanSquare).sigma2, vec![Some(0.0)]);
        let empty = ResidualTable { entries: vec![], per_user_counts: vec![0] };
        assert_eq!(estimate_user_variance(&empty, VarianceConvention::MeanSquare).sigma2, vec![None]);
    }

    #[test]
    fn weight_floor() {
        let v = UserVariance { sigma2: vec![Some(1e-6), Some(4.0), Some(1e-4), None] };
        let w = weights_from_variance(&v, DEFAULT_WEIGHT_FLOOR).unwrap();
        let w = w.as_slice();
        assert_eq!(w[0], 1e4);
        assert_eq!(w[1], 0.25);
        assert_eq!(w[2], 1e4);
        let pooled = (1e-4 + 4.0 + 1e-4) / 3.0;
        assert!((w[3] - 1.0 / pooled).abs() < 1e-12);
        assert!(weights_from_variance(&v, 0.0).is_err());
    }

    #[test]
    fn decoded_intercepts_are_weighted_column_means() {
        let t = LatentParams {
            mu: 0.2,
            h: vec![0.1, -0.3, 0.5],
            i: vec![0.4, -0.1],
            f: vec![1.0, -2.0, 0.5],
            g: vec![0.3, 0.7],
        };
        let w = [1.0, 2.0, 4.0];
        let dec = decoded_note_intercepts(&t, &w).unwrap();
        let dense = t.reconstruct();
        let ws: f64 = w.iter().sum();
        let col: Vec<f64> = (0..2)
            .map(|n| (0..3).map(|u| w[u] * dense[u][n]).sum::<f64>() / ws)
            .collect();
        let m = (col[0] + col[1]) / 2.0;
        for n in 0..2 {
            assert!((dec[n] - (col[n] - m)).abs() < 1e-12);
        }
    }
}
