use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{LatentParams, ObservationSet};

/// Ridge penalties on the four latent blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub h: f64,
    pub i: f64,
    pub f: f64,
    pub g: f64,
}

impl Regularization {
    /// `λ_u` on the rater blocks (h, f) and `λ_n` on the note blocks (i, g).
    pub fn paired(lambda_u: f64, lambda_n: f64) -> Self {
        Self {
            h: lambda_u,
            f: lambda_u,
            i: lambda_n,
            g: lambda_n,
        }
    }

    pub fn uniform(lambda: f64) -> Self {
        Self::paired(lambda, lambda)
    }

    /// `0.03·|Ω|/(U+N)` on every block, so the penalty shrinks relative to
    /// the per-row data mass as the matrix gets sparser.
    pub fn default_for(obs: &ObservationSet) -> Self {
        let denom = (obs.num_users() + obs.num_notes()).max(1) as f64;
        Self::uniform(0.03 * obs.len() as f64 / denom)
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            h: self.h * k,
            i: self.i * k,
            f: self.f * k,
            g: self.g * k,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("h", self.h), ("i", self.i), ("f", self.f), ("g", self.g)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "regularization on {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Starting point of the solver.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Intercepts at zero, factors i.i.d. uniform on `(−scale, scale)`.
    Random { scale: f64 },
    /// Start from given parameters (dimensions must match the data).
    WarmStart(LatentParams),
}

impl Init {
    pub const DEFAULT_SCALE: f64 = 0.1;
}

impl Default for Init {
    fn default() -> Self {
        Init::Random { scale: Init::DEFAULT_SCALE }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    /// `None` selects [`Regularization::default_for`] on the data being fit.
    pub regularization: Option<Regularization>,
    pub max_sweeps: usize,
    /// Stop once the relative objective change over one sweep drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    pub init: Init,
    /// Fixed summation order for every reduction.
    pub deterministic: bool,
    pub execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            regularization: None,
            max_sweeps: 500,
            rel_tol: 1e-8,
            seed: 0,
            init: Init::default(),
            deterministic: true,
            execution: Execution::default(),
        }
    }
}

impl FitConfig {
    pub fn with_regularization(mut self, reg: Regularization) -> Self {
        self.regularization = Some(reg);
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::InvalidConfig("max_sweeps must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::InvalidConfig("rel_tol must be > 0".into()));
        }
        if let Init::Random { scale } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::InvalidConfig("init scale must be >= 0".into()));
            }
        }
        if let Some(r) = &self.regularization {
            r.validate()?;
        }
        Ok(())
    }

    pub fn resolved_regularization(&self, obs: &ObservationSet) -> Regularization {
        self.regularization
            .unwrap_or_else(|| Regularization::default_for(obs))
    }
}

/// Per-rater weights for the weighted objective; all strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some((u, &bad)) = w
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x.is_finite() && x > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "weight for rater {u} must be positive and finite, got {bad}"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(num_users: usize) -> Self {
        Self(vec![1.0; num_users])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|w| w * k).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}
