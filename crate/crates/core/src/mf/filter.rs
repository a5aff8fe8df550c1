use serde::{Deserialize, Serialize};

use crate::model::ObservationSet;

/// Minimum activity levels applied before every fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub min_ratings_per_note: usize,
    pub min_notes_per_rater: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_ratings_per_note: 5,
            min_notes_per_rater: 10,
        }
    }
}

/// Largest sub-matrix in which every note has at least
/// `min_ratings_per_note` ratings and every rater has rated at least
/// `min_notes_per_rater` notes.
///
/// Notes and raters below their floor are peeled off alternately until nothing
/// changes. Because removing a row or column only lowers other counts, the
/// fixpoint is the unique maximal closed subset. The result may be empty.
pub fn filter_observations(obs: &ObservationSet, thresholds: FilterThresholds) -> ObservationSet {
    let min_note = thresholds.min_ratings_per_note.max(1);
    let min_user = thresholds.min_notes_per_rater.max(1);
    let mut keep_user = vec![true; obs.num_users()];
    let mut keep_note = vec![true; obs.num_notes()];
    loop {
        let mut uc = vec![0usize; obs.num_users()];
        let mut nc = vec![0usize; obs.num_notes()];
        for e in obs.entries() {
            let (u, n) = (e.user as usize, e.note as usize);
            if keep_user[u] && keep_note[n] {
                uc[u] += 1;
                nc[n] += 1;
            }
        }
        let mut changed = false;
        for (n, k) in keep_note.iter_mut().enumerate() {
            if *k && nc[n] < min_note {
                *k = false;
                changed = true;
            }
        }
        for (u, k) in keep_user.iter_mut().enumerate() {
            if *k && uc[u] < min_user {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    obs.restrict(&keep_user, &keep_note)
}
