//! Regularised rank-1 factorisation engine.

mod config;
mod filter;
mod solver;

pub use config::{FitConfig, Init, Regularization, WeightVector};
pub use filter::{filter_observations, FilterThresholds};
pub use solver::{fit, fit_clamped, objective, Clamp, FitResult};

use crate::model::{classify_note, LatentParams, NoteStatus};

/// Orients the factors so that most raters have a negative factor.
///
/// Flips `(f, g) → (−f, −g)` iff strictly positive entries of `f` outnumber
/// strictly negative ones; on a tie, iff `Σ f_u > 0`. The fitted matrix is
/// unchanged.
pub fn fix_factor_signs(mut theta: LatentParams) -> LatentParams {
    let pos = theta.f.iter().filter(|&&x| x > 0.0).count();
    let neg = theta.f.iter().filter(|&&x| x < 0.0).count();
    let flip = pos > neg || (pos == neg && theta.f.iter().sum::<f64>() > 0.0);
    if flip {
        theta.flip_factors();
    }
    theta
}

/// Status of every note from its intercept.
pub fn classify_all(theta: &LatentParams) -> Vec<NoteStatus> {
    theta.i.iter().map(|&x| classify_note(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_f(f: Vec<f64>) -> LatentParams {
        let nu = f.len();
        LatentParams {
            mu: 0.0,
            h: vec![0.0; nu],
            i: vec![0.1, 0.2],
            f,
            g: vec![0.5, -1.5],
        }
    }

    #[test]
    fn sign_fix_examples() {
        let t = fix_factor_signs(with_f(vec![-1.0, -1.0, 1.0]));
        assert_eq!(t.f, vec![-1.0, -1.0, 1.0]);
        assert_eq!(t.g, vec![0.5, -1.5]);

        let t = fix_factor_signs(with_f(vec![1.0, 1.0, -1.0]));
        assert_eq!(t.f, vec![-1.0, -1.0, 1.0]);
        assert_eq!(t.g, vec![-0.5, 1.5]);

        let t = fix_factor_signs(with_f(vec![1.0, -1.0]));
        assert_eq!(t.f, vec![1.0, -1.0]);

        let t = fix_factor_signs(with_f(vec![2.0, -1.0]));
        assert_eq!(t.f, vec![-2.0, 1.0]);
    }

    #[test]
    fn classify_all_examples() {
        let t = LatentParams {
            mu: 0.0,
            h: vec![],
            i: vec![0.5, 0.0, -0.1],
            f: vec![],
            g: vec![0.0; 3],
        };
        assert_eq!(
            classify_all(&t),
            vec![NoteStatus::Helpful, NoteStatus::NeedsMoreRatings, NoteStatus::NotHelpful]
        );
        assert!(classify_all(&LatentParams::zeros(0, 0)).is_empty());
    }

    #[test]
    fn classify_all_matches_scalar() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let i: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = LatentParams { mu: 0.0, h: vec![], g: vec![0.0; 1000], f: vec![], i: i.clone() };
        let all = classify_all(&t);
        for (x, s) in i.iter().zip(all) {
            assert_eq!(classify_note(*x), s);
        }
    }

    proptest! {
        #[test]
        fn sign_fix_preserves_products(f in prop::collection::vec(-2.0f64..2.0, 1..12), g in prop::collection::vec(-2.0f64..2.0, 1..12)) {
            let t = LatentParams { mu: 0.1, h: vec![0.0; f.len()], i: vec![0.0; g.len()], f, g };
            let s = fix_factor_signs(t.clone());
            for u in 0..t.num_users() {
                for n in 0..t.num_notes() {
                    prop_assert_eq!(t.predict(u, n), s.predict(u, n));
                }
            }
            let pos = s.f.iter().filter(|&&x| x > 0.0).count();
            let neg = s.f.iter().filter(|&&x| x < 0.0).count();
            prop_assert!(pos <= neg);
        }
    }
}
