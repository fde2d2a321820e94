//! Nonlinear least-squares engine: trust-region batch solves, graduated
//! non-convexity, and an incremental warm-started interface.

mod gnc;
mod incremental;
mod linear;
mod trust_region;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::factors::{Factor, FactorError, VariableKey, MU_SCHEDULE};

pub use gnc::{optimize_gnc, RobustState, RobustStatus};
pub use incremental::IncrementalSolver;
pub use trust_region::{optimize_batch, robust_cost};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("no initial value for {0}")]
    MissingInit(VariableKey),
    #[error("variable {0} initialized twice")]
    DuplicateInit(VariableKey),
    #[error("problem has no prior or fixed neighbor; gauge is unconstrained")]
    Unconstrained,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_radius: f64,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    pub mu_schedule: Vec<f64>,
    /// Tangent-norm change that pulls a variable's neighbors into the active set.
    pub activity_threshold: f64,
    /// Problems up to this many scalar unknowns use a dense factorization.
    pub dense_limit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            initial_radius: 1.0,
            relative_tolerance: 1e-6,
            gradient_tolerance: 1e-8,
            mu_schedule: MU_SCHEDULE.to_vec(),
            activity_threshold: 1e-4,
            dense_limit: 120,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        for (name, v) in [
            ("initial_radius", self.initial_radius),
            ("relative_tolerance", self.relative_tolerance),
            ("gradient_tolerance", self.gradient_tolerance),
            ("activity_threshold", self.activity_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        let s = &self.mu_schedule;
        if s.is_empty() || s.windows(2).any(|w| w[1] < w[0]) || s.last() != Some(&1.0) || s[0] < 0.0 {
            return bad("mu schedule must be nondecreasing, nonnegative and end at 1.0");
        }
        Ok(())
    }

    pub fn final_stage(&self) -> usize {
        self.mu_schedule.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Normal equations could not be factorized; values are the best found.
    Singular,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub values: crate::factors::Values,
    pub status: SolveStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Ordered factors plus a variable → factor adjacency index.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    factors: Vec<Factor>,
    adjacency: BTreeMap<VariableKey, Vec<usize>>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, factor: Factor) -> usize {
        let idx = self.factors.len();
        for k in factor.keys() {
            self.adjacency.entry(*k).or_default().push(idx);
        }
        self.factors.push(factor);
        idx
    }

    /// Drops every factor with index `len` or above.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.factors.len() {
            return;
        }
        for f in &self.factors[len..] {
            for k in f.keys() {
                if let Some(list) = self.adjacency.get_mut(k) {
                    list.retain(|&i| i < len);
                    if list.is_empty() {
                        self.adjacency.remove(k);
                    }
                }
            }
        }
        self.factors.truncate(len);
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, idx: usize) -> &Factor {
        &self.factors[idx]
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn variables(&self) -> impl Iterator<Item = &VariableKey> {
        self.adjacency.keys()
    }

    pub fn factors_of(&self, key: &VariableKey) -> &[usize] {
        self.adjacency.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Variables sharing at least one factor with `key`.
    pub fn neighbors(&self, key: &VariableKey) -> BTreeSet<VariableKey> {
        self.factors_of(key)
            .iter()
            .flat_map(|&f| self.factors[f].keys().iter().copied())
            .filter(|k| k != key)
            .collect()
    }

    /// Checks the adjacency index against the factor key lists.
    pub fn is_consistent(&self) -> bool {
        let mut rebuilt: BTreeMap<VariableKey, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.factors.iter().enumerate() {
            for k in f.keys() {
                rebuilt.entry(*k).or_default().push(i);
            }
        }
        rebuilt == self.adjacency
    }
}
