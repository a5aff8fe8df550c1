//! Block coordinate descent for the weighted ridge rank-1 objective
//!
//! ```text
//! Σ_(u,n)∈Ω w_u (r_un − μ − h_u − i_n − f_u g_n)²
//!     + λ_h‖h‖² + λ_f‖f‖² + λ_i‖i‖² + λ_g‖g‖²
//! ```
//!
//! One sweep minimises exactly over μ, then over each rater's `(h_u, f_u)`
//! pair, then over each note's `(i_n, g_n)` pair. Every step is an exact block
//! minimiser so the objective never increases. Rater blocks are independent of
//! each other given the note parameters (and vice versa), which is where the
//! data parallelism comes from.

use rand::Rng;

use super::config::{FitConfig, Init, Regularization, WeightVector};
use super::fix_factor_signs;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{LatentParams, ObservationSet};
use crate::rng::substream;

/// Parameters held fixed during a fit.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Clamp {
    #[default]
    None,
    /// Note factors fixed at the given values; μ, h, i, f are free.
    NoteFactors(Vec<f64>),
    /// Rater factors fixed at the given values; μ, h, i, g are free.
    UserFactors(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: LatentParams,
    /// Objective at the solver's final iterate (before re-parametrisation).
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after initialisation followed by one value per sweep.
    pub trace: Vec<f64>,
}

/// Compressed adjacency in both directions.
pub(crate) struct Adjacency {
    user_off: Vec<usize>,
    user_note: Vec<u32>,
    user_val: Vec<f64>,
    note_off: Vec<usize>,
    note_user: Vec<u32>,
    note_val: Vec<f64>,
}

impl Adjacency {
    pub(crate) fn new(obs: &ObservationSet) -> Self {
        let (nu, nn) = (obs.num_users(), obs.num_notes());
        let mut user_off = vec![0usize; nu + 1];
        let mut note_off = vec![0usize; nn + 1];
        for e in obs.entries() {
            user_off[e.user as usize + 1] += 1;
            note_off[e.note as usize + 1] += 1;
        }
        for k in 0..nu {
            user_off[k + 1] += user_off[k];
        }
        for k in 0..nn {
            note_off[k + 1] += note_off[k];
        }
        let m = obs.len();
        let (mut user_note, mut user_val) = (vec![0u32; m], vec![0.0; m]);
        let (mut note_user, mut note_val) = (vec![0u32; m], vec![0.0; m]);
        let mut ucur = user_off.clone();
        let mut ncur = note_off.clone();
        for e in obs.entries() {
            let (u, n) = (e.user as usize, e.note as usize);
            user_note[ucur[u]] = e.note;
            user_val[ucur[u]] = e.value;
            ucur[u] += 1;
            note_user[ncur[n]] = e.user;
            note_val[ncur[n]] = e.value;
            ncur[n] += 1;
        }
        Self {
            user_off,
            user_note,
            user_val,
            note_off,
            note_user,
            note_val,
        }
    }

    fn user_row(&self, u: usize) -> (&[u32], &[f64]) {
        let r = self.user_off[u]..self.user_off[u + 1];
        (&self.user_note[r.clone()], &self.user_val[r])
    }

    fn note_col(&self, n: usize) -> (&[u32], &[f64]) {
        let r = self.note_off[n]..self.note_off[n + 1];
        (&self.note_user[r.clone()], &self.note_val[r])
    }
}

/// Weighted ridge objective of `theta` on `obs`.
pub fn objective(
    obs: &ObservationSet,
    theta: &LatentParams,
    weights: Option<&WeightVector>,
    reg: &Regularization,
) -> f64 {
    let red = Reducer {
        execution: Execution::Sequential,
        ordered: true,
    };
    objective_with(obs, theta, weights.map(|w| w.as_slice()), reg, red)
}

#[derive(Clone, Copy)]
struct Reducer {
    execution: Execution,
    ordered: bool,
}

impl Reducer {
    fn sum<F: Fn(usize) -> f64 + Sync + Send>(self, n: usize, f: F) -> f64 {
        if self.ordered {
            exec::sum_range(self.execution, n, f)
        } else {
            exec::sum_range_unordered(self.execution, n, f)
        }
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn objective_with(
    obs: &ObservationSet,
    t: &LatentParams,
    w: Option<&[f64]>,
    reg: &Regularization,
    red: Reducer,
) -> f64 {
    let entries = obs.entries();
    let loss = red.sum(entries.len(), |k| {
        let e = entries[k];
        let (u, n) = (e.user as usize, e.note as usize);
        let r = e.value - t.predict(u, n);
        w.map_or(1.0, |w| w[u]) * r * r
    });
    loss + reg.h * sq(&t.h) + reg.f * sq(&t.f) + reg.i * sq(&t.i) + reg.g * sq(&t.g)
}

/// Minimiser of `½xᵀAx − bᵀx` for a 2×2 SPD system, falling back to
/// successive coordinate updates from `cur` when `A` is (nearly) singular.
fn solve_pair(a11: f64, a12: f64, a22: f64, b1: f64, b2: f64, cur: (f64, f64)) -> (f64, f64) {
    let det = a11 * a22 - a12 * a12;
    if a11 > 0.0 && a22 > 0.0 && det > 1e-12 * a11 * a22 {
        ((b1 * a22 - b2 * a12) / det, (a11 * b2 - a12 * b1) / det)
    } else {
        let x1 = if a11 > 0.0 { (b1 - a12 * cur.1) / a11 } else { cur.0 };
        let x2 = if a22 > 0.0 { (b2 - a12 * x1) / a22 } else { cur.1 };
        (x1, x2)
    }
}

fn initial_params(obs: &ObservationSet, cfg: &FitConfig) -> Result<LatentParams> {
    let (nu, nn) = (obs.num_users(), obs.num_notes());
    match &cfg.init {
        Init::WarmStart(t) => {
            if t.num_users() != nu {
                return Err(Error::DimensionMismatch {
                    what: "warm-start raters",
                    expected: nu,
                    found: t.num_users(),
                });
            }
            if t.num_notes() != nn {
                return Err(Error::DimensionMismatch {
                    what: "warm-start notes",
                    expected: nn,
                    found: t.num_notes(),
                });
            }
            if !t.is_finite() {
                return Err(Error::InvalidConfig("warm start contains non-finite values".into()));
            }
            Ok(t.clone())
        }
        Init::Random { scale } => {
            let mut rng = substream(cfg.seed, "mf-init", 0);
            let mut t = LatentParams::zeros(nu, nn);
            if *scale > 0.0 {
                t.f.iter_mut()
                    .for_each(|x| *x = rng.random_range(-scale..*scale));
                t.g.iter_mut()
                    .for_each(|x| *x = rng.random_range(-scale..*scale));
            }
            Ok(t)
        }
    }
}

fn check_inputs(obs: &ObservationSet, weights: Option<&WeightVector>) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    if let Some(e) = obs.entries().iter().find(|e| !e.value.is_finite()) {
        return Err(Error::NonFiniteRating {
            rater: obs.user_ids()[e.user as usize].clone(),
            note: obs.note_ids()[e.note as usize].clone(),
            value: e.value,
        });
    }
    if let Some(w) = weights {
        if w.len() != obs.num_users() {
            return Err(Error::DimensionMismatch {
                what: "weights",
                expected: obs.num_users(),
                found: w.len(),
            });
        }
    }
    Ok(())
}

/// Fits the (optionally weighted) rank-1 model and returns it in canonical
/// form with the factor sign fixed so most raters have a negative factor.
pub fn fit(
    obs: &ObservationSet,
    cfg: &FitConfig,
    weights: Option<&WeightVector>,
) -> Result<FitResult> {
    let mut res = fit_raw(obs, cfg, weights, &Clamp::None)?;
    res.params = fix_factor_signs(res.params.canonical());
    Ok(res)
}

/// Fits with some parameters held fixed. The result is returned as the
/// solver left it: no centring, rescaling or sign fixing.
pub fn fit_clamped(
    obs: &ObservationSet,
    cfg: &FitConfig,
    weights: Option<&WeightVector>,
    clamp: &Clamp,
) -> Result<FitResult> {
    fit_raw(obs, cfg, weights, clamp)
}

fn fit_raw(
    obs: &ObservationSet,
    cfg: &FitConfig,
    weights: Option<&WeightVector>,
    clamp: &Clamp,
) -> Result<FitResult> {
    cfg.validate()?;
    check_inputs(obs, weights)?;
    let (nu, nn) = (obs.num_users(), obs.num_notes());
    let reg = cfg.resolved_regularization(obs);
    let mut t = initial_params(obs, cfg)?;
    match clamp {
        Clamp::None => {}
        Clamp::NoteFactors(g) => {
            if g.len() != nn {
                return Err(Error::DimensionMismatch {
                    what: "clamped note factors",
                    expected: nn,
                    found: g.len(),
                });
            }
            t.g = g.clone();
        }
        Clamp::UserFactors(f) => {
            if f.len() != nu {
                return Err(Error::DimensionMismatch {
                    what: "clamped rater factors",
                    expected: nu,
                    found: f.len(),
                });
            }
            t.f = f.clone();
        }
    }
    let adj = Adjacency::new(obs);
    let w = weights.map(|w| w.as_slice());
    let wt = |u: usize| w.map_or(1.0, |w| w[u]);
    let red = Reducer {
        execution: cfg.execution,
        ordered: cfg.deterministic,
    };
    let total_w = red.sum( nu, |u| wt(u) * adj.user_row(u).0.len() as f64);

    let mut prev = objective_with(obs, &t, w, &reg, red);
    let mut trace = vec![prev];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;

        // μ
        let entries = obs.entries();
        let num = red.sum(entries.len(), |k| {
            let e = entries[k];
            let (u, n) = (e.user as usize, e.note as usize);
            wt(u) * (e.value - t.h[u] - t.i[n] - t.f[u] * t.g[n])
        });
        t.mu = num / total_w;

        // raters
        let clamp_f = matches!(clamp, Clamp::UserFactors(_));
        let tr = &t;
        let user_blocks = exec::map_range(cfg.execution, nu, |u| {
            let (notes, vals) = adj.user_row(u);
            let wu = wt(u);
            let (mut s1, mut sg, mut sgg, mut sy, mut syg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&n, &r) in notes.iter().zip(vals) {
                let g = tr.g[n as usize];
                let y = r - tr.mu - tr.i[n as usize];
                s1 += 1.0;
                sg += g;
                sgg += g * g;
                sy += y;
                syg += y * g;
            }
            if clamp_f {
                let fu = tr.f[u];
                let h = wu * (sy - fu * sg) / (wu * s1 + reg.h);
                (h, fu)
            } else {
                solve_pair(
                    wu * s1 + reg.h,
                    wu * sg,
                    wu * sgg + reg.f,
                    wu * sy,
                    wu * syg,
                    (tr.h[u], tr.f[u]),
                )
            }
        });
        for (u, (h, f)) in user_blocks.into_iter().enumerate() {
            t.h[u] = h;
            t.f[u] = f;
        }

        // notes
        let clamp_g = matches!(clamp, Clamp::NoteFactors(_));
        let tr = &t;
        let note_blocks = exec::map_range(cfg.execution, nn, |n| {
            let (users, vals) = adj.note_col(n);
            let (mut s1, mut sf, mut sff, mut sy, mut syf) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&u, &r) in users.iter().zip(vals) {
                let u = u as usize;
                let wu = wt(u);
                let f = tr.f[u];
                let y = r - tr.mu - tr.h[u];
                s1 += wu;
                sf += wu * f;
                sff += wu * f * f;
                sy += wu * y;
                syf += wu * y * f;
            }
            if clamp_g {
                let gn = tr.g[n];
                ((sy - gn * sf) / (s1 + reg.i), gn)
            } else {
                solve_pair(s1 + reg.i, sf, sff + reg.g, sy, syf, (tr.i[n], tr.g[n]))
            }
        });
        for (n, (i, g)) in note_blocks.into_iter().enumerate() {
            t.i[n] = i;
            t.g[n] = g;
        }

        let obj = objective_with(obs, &t, w, &reg, red);
        debug_assert!(
            obj <= prev * (1.0 + 1e-9) + 1e-12,
            "objective increased: {prev} -> {obj}"
        );
        trace.push(obj);
        let rel = if prev > 0.0 { (prev - obj).abs() / prev } else { 0.0 };
        prev = obj;
        if rel < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "rank-1 fit stopped after {} sweeps without reaching rel_tol {}",
            sweeps,
            cfg.rel_tol
        );
    }
    if !t.is_finite() {
        return Err(Error::Degenerate("fit produced non-finite parameters".into()));
    }
    Ok(FitResult {
        params: t,
        objective: prev,
        sweeps,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObservationSet;

    fn full_matrix(t: &LatentParams) -> ObservationSet {
        let mut tr = Vec::new();
        for u in 0..t.num_users() {
            for n in 0..t.num_notes() {
                tr.push((format!("u{u}"), format!("n{n}"), t.predict(u, n)));
            }
        }
        ObservationSet::from_triples(tr).unwrap()
    }

    #[test]
    fn solve_pair_handles_singular_system() {
        let (a, b) = solve_pair(2.0, 1.0, 3.0, 1.0, 2.0, (0.0, 0.0));
        assert!((2.0 * a + b - 1.0).abs() < 1e-12 && (a + 3.0 * b - 2.0).abs() < 1e-12);
        let (a, b) = solve_pair(1.0, 1.0, 1.0, 2.0, 2.0, (0.0, 0.5));
        assert!((a - 1.5).abs() < 1e-12 && (b - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix() {
        let mut t = LatentParams::zeros(4, 5);
        t.mu = 0.5;
        let obs = full_matrix(&t);
        let cfg = FitConfig::default().with_regularization(Regularization::uniform(1e-9));
        let res = fit(&obs, &cfg, None).unwrap();
        let p = &res.params;
        assert!((p.mu - 0.5).abs() < 1e-6);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&p.h) < 1e-6 && norm(&p.i) < 1e-6);
        let prod: f64 = (0..4)
            .flat_map(|u| (0..5).map(move |n| (u, n)))
            .map(|(u, n)| (p.f[u] * p.g[n]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(prod < 1e-6);
    }

    #[test]
    fn exact_three_by_three_recovery() {
        let t = LatentParams {
            mu: 0.4,
            h: vec![0.1, -0.2, 0.05],
            i: vec![0.3, -0.1, 0.0],
            f: vec![1.0, -0.5, 0.7],
            g: vec![0.2, 0.6, -0.4],
        };
        let obs = full_matrix(&t);
        let cfg = FitConfig {
            max_sweeps: 20_000,
            rel_tol: 1e-14,
            ..FitConfig::default()
        }
        .with_regularization(Regularization::uniform(1e-6));
        let res = fit(&obs, &cfg, None).unwrap();
        for e in obs.entries() {
            let p = res.params.predict(e.user as usize, e.note as usize);
            assert!((p - e.value).abs() <= 1e-4, "{p} vs {}", e.value);
        }
    }

    #[test]
    fn errors_on_empty_and_mismatched_weights() {
        let empty = ObservationSet::from_triples(Vec::<(String, String, f64)>::new()).unwrap();
        assert!(matches!(
            fit(&empty, &FitConfig::default(), None),
            Err(Error::EmptyObservations)
        ));
        let obs = ObservationSet::from_triples([("a", "x", 1.0), ("b", "x", 0.0)]).unwrap();
        let w = WeightVector::uniform(3);
        assert!(fit(&obs, &FitConfig::default(), Some(&w)).is_err());
    }

    #[test]
    fn objective_trace_is_monotone() {
        let t = LatentParams {
            mu: 0.1,
            h: (0..12).map(|k| (k as f64 * 0.7).sin() * 0.2).collect(),
            i: (0..9).map(|k| (k as f64 * 1.3).cos() * 0.3).collect(),
            f: (0..12).map(|k| (k as f64 * 0.9).cos()).collect(),
            g: (0..9).map(|k| (k as f64 * 0.4).sin() * 0.5).collect(),
        };
        let mut tr = Vec::new();
        for u in 0..12 {
            for n in 0..9 {
                if (u * 7 + n * 3) % 4 != 0 {
                    let noise = ((u * 31 + n * 17) as f64).sin() * 0.1;
                    tr.push((format!("u{u}"), format!("n{n}"), t.predict(u, n) + noise));
                }
            }
        }
        let obs = ObservationSet::from_triples(tr).unwrap();
        let res = fit(&obs, &FitConfig::default(), None).unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }
}
