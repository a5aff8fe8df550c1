//! Domain types and the rank-1 rating model
//! `r_un ≈ μ + h_u + i_n + f_u·g_n`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Note intercept at or above which a note is shown as helpful.
pub const HELPFUL_THRESHOLD: f64 = 0.4;
/// Note intercept strictly below which a note is labelled not helpful.
pub const NOT_HELPFUL_THRESHOLD: f64 = -0.05;

/// Tolerances used by [`LatentParams::is_canonical`].
pub const CANONICAL_MEAN_TOL: f64 = 1e-10;
pub const CANONICAL_SCALE_TOL: f64 = 1e-8;

/// True for the three admissible helpfulness values 0, 0.5 and 1.
pub fn is_rating_level(r: f64) -> bool {
    r == 0.0 || r == 0.5 || r == 1.0
}

/// One observed rating.
///
/// `latent` optionally carries the continuous report that produced `rating`
/// (synthetic data only); fits may consume it instead of the discrete level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingEvent {
    pub rater_id: String,
    pub note_id: String,
    pub created_at_ms: i64,
    pub rating: f64,
    pub latent: Option<f64>,
}

impl RatingEvent {
    pub fn new(
        rater_id: impl Into<String>,
        note_id: impl Into<String>,
        created_at_ms: i64,
        rating: f64,
    ) -> Result<Self> {
        if !is_rating_level(rating) {
            return Err(Error::InvalidConfig(format!(
                "rating {rating} is not one of 0, 0.5, 1"
            )));
        }
        if created_at_ms < 0 {
            return Err(Error::InvalidConfig(format!(
                "negative timestamp {created_at_ms}"
            )));
        }
        Ok(Self {
            rater_id: rater_id.into(),
            note_id: note_id.into(),
            created_at_ms,
            rating,
            latent: None,
        })
    }

    pub fn with_latent(mut self, latent: f64) -> Self {
        self.latent = Some(latent);
        self
    }

    /// The value a fit should consume under `source`.
    pub fn value(&self, source: ValueSource) -> f64 {
        match source {
            ValueSource::Rating => self.rating,
            ValueSource::Latent => self.latent.unwrap_or(self.rating),
        }
    }
}

/// Which number of a [`RatingEvent`] enters the observation matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    #[default]
    Rating,
    /// The continuous latent report when present, else the discrete rating.
    Latent,
}

/// How repeated ratings of the same (rater, note) pair are collapsed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    #[default]
    KeepLatest,
    KeepEarliest,
}

/// A single observed cell of the rating matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub user: u32,
    pub note: u32,
    pub value: f64,
}

/// The observed set Ω with dense rater and note indices.
///
/// Every index is referenced by at least one entry and each (user, note) pair
/// appears at most once.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    user_ids: Vec<String>,
    note_ids: Vec<String>,
    user_lookup: HashMap<String, usize>,
    note_lookup: HashMap<String, usize>,
    entries: Vec<Observation>,
}

impl ObservationSet {
    /// Builds from `(rater_id, note_id, value)` triples. Indices follow first
    /// appearance. A repeated pair is an error; resolve duplicates first.
    pub fn from_triples<I, R, N>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (R, N, f64)>,
        R: AsRef<str>,
        N: AsRef<str>,
    {
        let mut user_ids = Vec::new();
        let mut note_ids = Vec::new();
        let mut user_lookup = HashMap::new();
        let mut note_lookup = HashMap::new();
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (rater, note, value) in triples {
            let (rater, note) = (rater.as_ref(), note.as_ref());
            if !value.is_finite() {
                return Err(Error::NonFiniteRating {
                    rater: rater.to_string(),
                    note: note.to_string(),
                    value,
                });
            }
            let u = *user_lookup.entry(rater.to_string()).or_insert_with(|| {
                user_ids.push(rater.to_string());
                user_ids.len() - 1
            });
            let n = *note_lookup.entry(note.to_string()).or_insert_with(|| {
                note_ids.push(note.to_string());
                note_ids.len() - 1
            });
            if !seen.insert((u, n)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate rating for rater {rater} on note {note}"
                )));
            }
            entries.push(Observation {
                user: u as u32,
                note: n as u32,
                value,
            });
        }
        Ok(Self {
            user_ids,
            note_ids,
            user_lookup,
            note_lookup,
            entries,
        })
    }

    /// Builds from rating events, collapsing duplicate pairs per `policy`
    /// (ties on timestamp resolve to the later event in input order).
    pub fn from_events(
        events: &[RatingEvent],
        policy: DuplicatePolicy,
        source: ValueSource,
    ) -> Result<Self> {
        let mut chosen: HashMap<(&str, &str), usize> = HashMap::new();
        let mut order: Vec<(&str, &str)> = Vec::new();
        for (k, e) in events.iter().enumerate() {
            let key = (e.rater_id.as_str(), e.note_id.as_str());
            match chosen.get_mut(&key) {
                None => {
                    chosen.insert(key, k);
                    order.push(key);
                }
                Some(slot) => {
                    let cur = &events[*slot];
                    let replace = match policy {
                        DuplicatePolicy::KeepLatest => e.created_at_ms >= cur.created_at_ms,
                        DuplicatePolicy::KeepEarliest => e.created_at_ms < cur.created_at_ms,
                    };
                    if replace {
                        *slot = k;
                    }
                }
            }
        }
        Self::from_triples(order.into_iter().map(|key| {
            let e = &events[chosen[&key]];
            (key.0, key.1, e.value(source))
        }))
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_notes(&self) -> usize {
        self.note_ids.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn note_ids(&self) -> &[String] {
        &self.note_ids
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_lookup.get(id).copied()
    }

    pub fn note_index(&self, id: &str) -> Option<usize> {
        self.note_lookup.get(id).copied()
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_users()];
        for e in &self.entries {
            c[e.user as usize] += 1;
        }
        c
    }

    pub fn note_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_notes()];
        for e in &self.entries {
            c[e.note as usize] += 1;
        }
        c
    }

    /// Entries whose user and note are both kept, re-indexed densely.
    /// Users or notes left without entries are dropped.
    pub fn restrict(&self, keep_user: &[bool], keep_note: &[bool]) -> Self {
        Self::from_triples(
            self.entries
                .iter()
                .filter(|e| keep_user[e.user as usize] && keep_note[e.note as usize])
                .map(|e| {
                    (
                        self.user_ids[e.user as usize].as_str(),
                        self.note_ids[e.note as usize].as_str(),
                        e.value,
                    )
                }),
        )
        .expect("restriction of a valid set is valid")
    }

    /// Same observations with entries visited in `order`. Dense indices are
    /// reassigned by first appearance, which relabels users and notes.
    pub fn with_entries_reordered(&self, order: &[usize]) -> Self {
        Self::from_triples(order.iter().map(|&k| {
            let e = &self.entries[k];
            (
                self.user_ids[e.user as usize].as_str(),
                self.note_ids[e.note as usize].as_str(),
                e.value,
            )
        }))
        .expect("reordering of a valid set is valid")
    }
}

/// Parameters `θ = (μ, h, i, f, g)` of the rank-1 model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub mu: f64,
    pub h: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LatentParams {
    pub fn zeros(num_users: usize, num_notes: usize) -> Self {
        Self {
            mu: 0.0,
            h: vec![0.0; num_users],
            i: vec![0.0; num_notes],
            f: vec![0.0; num_users],
            g: vec![0.0; num_notes],
        }
    }

    /// Checks that user-side and note-side blocks have matching lengths.
    pub fn new(mu: f64, h: Vec<f64>, i: Vec<f64>, f: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if f.len() != h.len() {
            return Err(Error::DimensionMismatch {
                what: "rater factors",
                expected: h.len(),
                found: f.len(),
            });
        }
        if g.len() != i.len() {
            return Err(Error::DimensionMismatch {
                what: "note factors",
                expected: i.len(),
                found: g.len(),
            });
        }
        Ok(Self { mu, h, i, f, g })
    }

    pub fn num_users(&self) -> usize {
        self.h.len()
    }

    pub fn num_notes(&self) -> usize {
        self.i.len()
    }

    /// `μ + h_u + i_n + f_u g_n`. Panics when an index is out of range.
    #[inline]
    pub fn predict(&self, u: usize, n: usize) -> f64 {
        self.mu + self.h[u] + self.i[n] + self.f[u] * self.g[n]
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite()
            && [&self.h, &self.i, &self.f, &self.g]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// True when the rank-one term vanishes identically.
    pub fn is_rank_deficient(&self) -> bool {
        self.f.iter().all(|&x| x == 0.0) || self.g.iter().all(|&x| x == 0.0)
    }

    /// Mean-zero blocks and `‖f‖²/U = 1` (unless `f ≡ 0`).
    pub fn is_canonical(&self) -> bool {
        let centred = [&self.h, &self.i, &self.f, &self.g]
            .iter()
            .all(|v| mean(v).abs() <= CANONICAL_MEAN_TOL);
        let scaled = self.f.iter().all(|&x| x == 0.0)
            || (dot(&self.f, &self.f) / self.f.len() as f64 - 1.0).abs() <= CANONICAL_SCALE_TOL;
        centred && scaled
    }

    /// The canonical centred representation of the same matrix.
    ///
    /// Means of `h`, `i`, `f`, `g` move into `μ` and the intercepts, the
    /// factors are rescaled to `‖f‖²/U = 1`, and the sign is chosen so that the
    /// new `f` has a non-negative inner product with the input `f`. When the
    /// centred `f` vanishes both factors are set to zero.
    pub fn canonical(&self) -> Self {
        let (nu, nn) = (self.num_users(), self.num_notes());
        if nu == 0 || nn == 0 {
            return self.clone();
        }
        let (hb, ib, fb, gb) = (mean(&self.h), mean(&self.i), mean(&self.f), mean(&self.g));
        let mu = self.mu + hb + ib + fb * gb;
        let h: Vec<f64> = self
            .h
            .iter()
            .zip(&self.f)
            .map(|(&h, &f)| h - hb + gb * (f - fb))
            .collect();
        let i: Vec<f64> = self
            .i
            .iter()
            .zip(&self.g)
            .map(|(&i, &g)| i - ib + fb * (g - gb))
            .collect();
        let mut f: Vec<f64> = self.f.iter().map(|&x| x - fb).collect();
        let mut g: Vec<f64> = self.g.iter().map(|&x| x - gb).collect();

        let fmax = self.f.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        let fc_max = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if fc_max <= 1e-12 * fmax {
            f.iter_mut().for_each(|x| *x = 0.0);
            g.iter_mut().for_each(|x| *x = 0.0);
        } else {
            let s = (dot(&f, &f) / nu as f64).sqrt();
            let sign = if dot(&f, &self.f) < 0.0 { -1.0 } else { 1.0 };
            f.iter_mut().for_each(|x| *x *= sign / s);
            g.iter_mut().for_each(|x| *x *= sign * s);
        }
        Self { mu, h, i, f, g }
    }

    /// Flips `(f, g)` if needed so that `⟨f, reference⟩ ≥ 0`.
    pub fn oriented_like(mut self, reference: &[f64]) -> Self {
        if dot(&self.f, reference) < 0.0 {
            self.flip_factors();
        }
        self
    }

    /// `(f, g) → (−f, −g)`; the fitted matrix is unchanged.
    pub fn flip_factors(&mut self) {
        self.f.iter_mut().for_each(|x| *x = -*x);
        self.g.iter_mut().for_each(|x| *x = -*x);
    }

    /// Dense `U × N` reconstruction, row-major by user.
    pub fn reconstruct(&self) -> Vec<Vec<f64>> {
        (0..self.num_users())
            .map(|u| (0..self.num_notes()).map(|n| self.predict(u, n)).collect())
            .collect()
    }
}

/// `î⁰_n = î_n + c·ĝ_n`: shifts centred note intercepts back by a known mean
/// factor `c` expressed in the units and orientation of `g_hat`.
pub fn decenter_note_intercept(i_hat: &[f64], g_hat: &[f64], c: f64) -> Result<Vec<f64>> {
    if i_hat.len() != g_hat.len() {
        return Err(Error::DimensionMismatch {
            what: "note factors",
            expected: i_hat.len(),
            found: g_hat.len(),
        });
    }
    Ok(i_hat.iter().zip(g_hat).map(|(i, g)| i + c * g).collect())
}

/// Observed rating for a latent report: negative → 0, zero → 0.5, positive → 1.
///
/// Panics on a non-finite report.
pub fn discretize_report(a: f64) -> f64 {
    assert!(a.is_finite(), "discretize_report: non-finite report {a}");
    if a < 0.0 {
        0.0
    } else if a > 0.0 {
        1.0
    } else {
        0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoteStatus {
    Helpful,
    NotHelpful,
    NeedsMoreRatings,
}

impl NoteStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NoteStatus::Helpful => "HELPFUL",
            NoteStatus::NotHelpful => "NOT_HELPFUL",
            NoteStatus::NeedsMoreRatings => "NEEDS_MORE_RATINGS",
        }
    }
}

impl fmt::Display for NoteStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `î ≥ 0.4` → helpful, `î < −0.05` → not helpful, otherwise needs more ratings.
pub fn classify_note(i_hat: f64) -> NoteStatus {
    debug_assert!(i_hat.is_finite());
    if i_hat >= HELPFUL_THRESHOLD {
        NoteStatus::Helpful
    } else if i_hat < NOT_HELPFUL_THRESHOLD {
        NoteStatus::NotHelpful
    } else {
        NoteStatus::NeedsMoreRatings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_params(seed: u64, nu: usize, nn: usize) -> LatentParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        let (h, f, i, g) = (v(nu), v(nu), v(nn), v(nn));
        LatentParams { mu: 0.3, h, i, f, g }
    }

    fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn predict_examples() {
        let mut t = LatentParams::zeros(2, 3);
        t.mu = 0.5;
        assert_eq!(t.predict(1, 2), 0.5);
        let t = LatentParams {
            mu: 0.0,
            h: vec![0.1],
            i: vec![0.2],
            f: vec![2.0],
            g: vec![-0.5],
        };
        assert!((t.predict(0, 0) - (-0.7)).abs() < 1e-15);
    }

    #[test]
    fn predict_matches_dense_reconstruction() {
        let t = random_params(1, 7, 5);
        // dense oracle: μ11ᵀ + h1ᵀ + 1iᵀ + fgᵀ assembled term by term
        for u in 0..7 {
            for n in 0..5 {
                let mut m = t.mu;
                m += t.h[u];
                m += t.i[n];
                m += t.f[u] * t.g[n];
                assert_eq!(t.predict(u, n), m);
            }
        }
    }

    #[test]
    #[should_panic]
    fn predict_out_of_range_panics() {
        LatentParams::zeros(2, 2).predict(2, 0);
    }

    #[test]
    fn canonical_constant_vectors_collapse() {
        let (c1, c2, c3, c4) = (0.2, -0.3, 0.7, 1.5);
        let t = LatentParams {
            mu: 1.0,
            h: vec![c1; 4],
            i: vec![c2; 3],
            f: vec![c3; 4],
            g: vec![c4; 3],
        };
        let c = t.canonical();
        assert!((c.mu - (1.0 + c1 + c2 + c3 * c4)).abs() < 1e-12);
        for v in [&c.h, &c.i, &c.f, &c.g] {
            assert!(v.iter().all(|x| x.abs() < 1e-12));
        }
        assert!(c.is_rank_deficient());
        assert!(c.is_canonical());
    }

    #[test]
    fn canonical_preserves_reconstruction() {
        let t = random_params(9, 20, 20);
        let c = t.canonical();
        assert!(c.is_canonical());
        assert!(max_abs_diff(&t.reconstruct(), &c.reconstruct()) <= 1e-10);
        assert!(dot(&c.f, &t.f) >= 0.0);
    }

    #[test]
    fn decenter_examples() {
        assert_eq!(decenter_note_intercept(&[0.1, -0.2], &[0.3, 0.4], 0.0).unwrap(), vec![0.1, -0.2]);
        let out = decenter_note_intercept(&[0.1], &[0.2], 0.5).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-15);
        assert!(decenter_note_intercept(&[0.1], &[0.2, 0.3], 0.5).is_err());
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize_report(-0.3), 0.0);
        assert_eq!(discretize_report(0.0), 0.5);
        assert_eq!(discretize_report(-0.0), 0.5);
        assert_eq!(discretize_report(1e-12), 1.0);
    }

    #[test]
    #[should_panic]
    fn discretize_rejects_nan() {
        discretize_report(f64::NAN);
    }

    #[test]
    fn classify_boundaries() {
        assert_eq!(classify_note(0.4), NoteStatus::Helpful);
        assert_eq!(classify_note(0.399_999_999), NoteStatus::NeedsMoreRatings);
        assert_eq!(classify_note(-0.05), NoteStatus::NeedsMoreRatings);
        assert_eq!(classify_note(-0.06), NoteStatus::NotHelpful);
        assert_eq!(classify_note(0.0), NoteStatus::NeedsMoreRatings);
    }

    #[test]
    fn rating_event_validation() {
        assert!(RatingEvent::new("a", "b", 0, 0.5).is_ok());
        assert!(RatingEvent::new("a", "b", 0, 0.7).is_err());
        assert!(RatingEvent::new("a", "b", -1, 1.0).is_err());
    }

    #[test]
    fn from_events_keeps_latest_duplicate() {
        let ev = vec![
            RatingEvent::new("u1", "n1", 10, 1.0).unwrap(),
            RatingEvent::new("u1", "n1", 30, 0.0).unwrap(),
            RatingEvent::new("u1", "n1", 20, 0.5).unwrap(),
            RatingEvent::new("u2", "n1", 5, 0.5).unwrap(),
        ];
        let obs = ObservationSet::from_events(&ev, DuplicatePolicy::KeepLatest, ValueSource::Rating)
            .unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs.entries()[0].value, 0.0);
        let obs = ObservationSet::from_events(&ev, DuplicatePolicy::KeepEarliest, ValueSource::Rating)
            .unwrap();
        assert_eq!(obs.entries()[0].value, 1.0);
    }

    #[test]
    fn from_triples_rejects_bad_input() {
        assert!(matches!(
            ObservationSet::from_triples([("a", "b", f64::NAN)]),
            Err(Error::NonFiniteRating { .. })
        ));
        assert!(ObservationSet::from_triples([("a", "b", 1.0), ("a", "b", 0.0)]).is_err());
    }

    #[test]
    fn discretize_range_and_monotone() {
        let grid: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.01).collect();
        let out: Vec<f64> = grid.iter().map(|&a| discretize_report(a)).collect();
        assert!(out.iter().all(|&r| is_rating_level(r)));
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
        for lvl in [0.0, 0.5, 1.0] {
            assert!(out.contains(&lvl));
        }
    }

    proptest! {
        #[test]
        fn canonical_idempotent_and_reconstruction_preserving(seed in any::<u64>(), nu in 2usize..15, nn in 2usize..15) {
            let t = random_params(seed, nu, nn);
            let c = t.canonical();
            prop_assert!(c.is_canonical());
            prop_assert!(max_abs_diff(&t.reconstruct(), &c.reconstruct()) <= 1e-10);
            let cc = c.canonical();
            prop_assert!((cc.mu - c.mu).abs() <= 1e-12);
            for (a, b) in [(&cc.h, &c.h), (&cc.i, &c.i), (&cc.f, &c.f), (&cc.g, &c.g)] {
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn predict_is_linear_in_intercept_blocks(seed in any::<u64>(), k in -3.0f64..3.0) {
            let t = random_params(seed, 4, 5);
            let mut t2 = t.clone();
            t2.h.iter_mut().for_each(|x| *x *= k);
            let mut t0 = t.clone();
            t0.h.iter_mut().for_each(|x| *x = 0.0);
            for u in 0..4 {
                for n in 0..5 {
                    let lin = t0.predict(u, n) + k * (t.predict(u, n) - t0.predict(u, n));
                    prop_assert!((t2.predict(u, n) - lin).abs() < 1e-12);
                }
            }
            let mut tg = t.clone();
            tg.g.iter_mut().for_each(|x| *x *= k);
            let mut tg0 = t.clone();
            tg0.g.iter_mut().for_each(|x| *x = 0.0);
            for u in 0..4 {
                for n in 0..5 {
                    let lin = tg0.predict(u, n) + k * (t.predict(u, n) - tg0.predict(u, n));
                    prop_assert!((tg.predict(u, n) - lin).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn classify_partitions_real_line(x in -10.0f64..10.0) {
            let s = classify_note(x);
            let expected = if x >= 0.4 { NoteStatus::Helpful } else if x < -0.05 { NoteStatus::NotHelpful } else { NoteStatus::NeedsMoreRatings };
            prop_assert_eq!(s, expected);
        }
    }
}
