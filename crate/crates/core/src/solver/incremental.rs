use std::collections::BTreeSet;

use super::gnc::RobustState;
use super::trust_region::Subproblem;
use super::{FactorGraph, SolveStatus, SolverConfig, SolverError};
use crate::factors::{Factor, Value, Values, VariableKey};

const MAX_WAVEFRONT_ROUNDS: usize = 50;

/// Warm-started robust solver that only re-solves the affected part of the graph.
///
/// Each update seeds an active set from the re-elimination set and the
/// variables of new or re-convexified factors, then grows it across factor
/// adjacency from every variable that moved more than the activity threshold.
/// Variables outside the active set are held fixed.
#[derive(Debug, Clone)]
pub struct IncrementalSolver {
    graph: FactorGraph,
    values: Values,
    robust: RobustState,
    config: SolverConfig,
    last_status: SolveStatus,
}

impl IncrementalSolver {
    pub fn new(config: SolverConfig) -> Result<Self, SolverError> {
        config.validate()?;
        Ok(IncrementalSolver {
            graph: FactorGraph::new(),
            values: Values::new(),
            robust: RobustState::new(),
            config,
            last_status: SolveStatus::Converged,
        })
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn robust_state(&self) -> &RobustState {
        &self.robust
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn last_status(&self) -> SolveStatus {
        self.last_status
    }

    /// Overwrites the estimate of an existing variable; the next update re-optimizes it.
    pub fn set_value(&mut self, key: VariableKey, value: Value) -> Result<(), SolverError> {
        match self.values.get_mut(&key) {
            Some(v) if v.tangent_dim() == value.tangent_dim() => {
                *v = value;
                Ok(())
            }
            Some(_) => Err(SolverError::InvalidConfig(format!("value for {key} changes dimension"))),
            None => Err(SolverError::MissingInit(key)),
        }
    }

    pub fn update(
        &mut self,
        new_factors: Vec<Factor>,
        new_inits: Values,
        reelim: &BTreeSet<VariableKey>,
        cvx: &BTreeSet<VariableKey>,
    ) -> Result<&Values, SolverError> {
        for (k, _) in new_inits.iter() {
            if self.values.contains(k) {
                return Err(SolverError::DuplicateInit(*k));
            }
        }
        for f in &new_factors {
            for k in f.keys() {
                if !self.values.contains(k) && !new_inits.contains(k) {
                    return Err(SolverError::MissingInit(*k));
                }
            }
        }

        let first_new = self.graph.len();
        let backup_robust = self.robust.clone();
        let new_keys: Vec<VariableKey> = new_inits.keys().copied().collect();
        let mut seed: BTreeSet<VariableKey> = reelim.iter().filter(|k| self.values.contains(k)).copied().collect();
        seed.extend(new_keys.iter().copied());
        for f in new_factors {
            seed.extend(f.keys().iter().copied());
            let idx = self.graph.add(f);
            self.robust.track(&self.graph, idx);
        }
        self.values.extend(new_inits);
        for k in cvx {
            for &f in self.graph.factors_of(k) {
                if self.robust.get(f).is_some() && self.graph.factor(f).kernel().is_graduated() {
                    self.robust.set_stage(f, 0);
                    seed.extend(self.graph.factor(f).keys().iter().copied());
                }
            }
        }

        match self.solve_from(seed) {
            Ok(values) => {
                self.values = values;
                Ok(&self.values)
            }
            Err(e) => {
                self.graph.truncate(first_new);
                for k in &new_keys {
                    self.values.remove(k);
                }
                self.robust = backup_robust;
                Err(e)
            }
        }
    }

    fn solve_from(&mut self, seed: BTreeSet<VariableKey>) -> Result<Values, SolverError> {
        if seed.is_empty() {
            return Ok(self.values.clone());
        }
        let cfg = self.config.clone();
        let pending = self.robust.graduated_in_progress(&self.graph, &cfg);
        let first_stage = pending
            .iter()
            .filter_map(|f| self.robust.get(*f).map(|e| e.stage))
            .min()
            .unwrap_or(cfg.final_stage());
        let mut values = self.values.clone();
        let mut active = seed;
        self.last_status = SolveStatus::Converged;
        let stages: Vec<usize> = if pending.is_empty() {
            vec![cfg.final_stage()]
        } else {
            (first_stage..=cfg.final_stage()).collect()
        };
        for stage in stages {
            for &f in &pending {
                let cur = self.robust.get(f).map(|e| e.stage).unwrap_or(0);
                self.robust.set_stage(f, cur.max(stage));
            }
            let status = self.wavefront(&mut values, &mut active)?;
            if status == SolveStatus::Singular {
                self.last_status = status;
                break;
            }
            if status == SolveStatus::MaxIterations {
                self.last_status = status;
            }
        }
        let touched: BTreeSet<usize> = active
            .iter()
            .flat_map(|k| self.graph.factors_of(k).iter().copied())
            .collect();
        self.robust.classify(&self.graph, &values, Some(&touched))?;
        Ok(values)
    }

    fn wavefront(&self, values: &mut Values, active: &mut BTreeSet<VariableKey>) -> Result<SolveStatus, SolverError> {
        let mut status = SolveStatus::Converged;
        for _ in 0..MAX_WAVEFRONT_ROUNDS {
            let sub = Subproblem::new(&self.graph, values, active, &|f| self.robust.kernel_for(&self.graph, f, &self.config))?;
            let report = sub.run(values, &self.config)?;
            status = report.status;
            let mut grow = BTreeSet::new();
            for k in active.iter() {
                let before = values.get(k).expect("active key has a value");
                let after = report.values.get(k).expect("active key has a value");
                let moved = after.local_from(before).map(|d| d.norm()).unwrap_or(f64::INFINITY);
                if moved > self.config.activity_threshold {
                    grow.extend(self.graph.neighbors(k).into_iter().filter(|n| !active.contains(n)));
                }
            }
            *values = report.values;
            if grow.is_empty() || status == SolveStatus::Singular {
                break;
            }
            active.extend(grow);
        }
        Ok(status)
    }
}
