use std::collections::{BTreeMap, BTreeSet};

use super::trust_region::Subproblem;
use super::{optimize_batch, FactorGraph, SolveReport, SolveStatus, SolverConfig, SolverError};
use crate::factors::{chi2_95, RobustKernel, Values, VariableKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobustStatus {
    /// Index into the μ schedule (meaningful for graduated kernels).
    pub stage: usize,
    /// Squared whitened residual below the χ²(0.95) threshold.
    pub inlier: bool,
}

/// Per-factor robust bookkeeping for outlier candidates and graduated factors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobustState {
    entries: BTreeMap<usize, RobustStatus>,
}

impl RobustState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, factor: usize) -> Option<RobustStatus> {
        self.entries.get(&factor).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, RobustStatus)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn track(&mut self, graph: &FactorGraph, factor: usize) {
        let f = graph.factor(factor);
        if f.is_outlier_candidate() || f.kernel().is_graduated() {
            self.entries.insert(factor, RobustStatus { stage: 0, inlier: true });
        }
    }

    pub(crate) fn set_stage(&mut self, factor: usize, stage: usize) {
        if let Some(e) = self.entries.get_mut(&factor) {
            e.stage = stage;
        }
    }

    /// Kernel with μ taken from the factor's current stage.
    pub(crate) fn kernel_for(&self, graph: &FactorGraph, factor: usize, cfg: &SolverConfig) -> RobustKernel {
        let k = graph.factor(factor).kernel();
        match (k, self.entries.get(&factor)) {
            (RobustKernel::Graduated { .. }, Some(e)) => k.with_mu(cfg.mu_schedule[e.stage.min(cfg.final_stage())]),
            _ => k,
        }
    }

    pub(crate) fn graduated_in_progress(&self, graph: &FactorGraph, cfg: &SolverConfig) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|(f, e)| graph.factor(**f).kernel().is_graduated() && e.stage < cfg.final_stage())
            .map(|(f, _)| *f)
            .collect()
    }

    /// Re-runs the χ² test for the given factors (all tracked factors if `None`).
    pub(crate) fn classify(&mut self, graph: &FactorGraph, values: &Values, only: Option<&BTreeSet<usize>>) -> Result<(), SolverError> {
        for (f, e) in self.entries.iter_mut() {
            if only.is_some_and(|o| !o.contains(f)) {
                continue;
            }
            let factor = graph.factor(*f);
            e.inlier = factor.squared_error(values)? < chi2_95(factor.dim());
        }
        Ok(())
    }
}

/// Upper bound on accept/re-solve rounds after the continuation.
pub const REFINE_ROUNDS: usize = 5;

/// Unweighted solve over the untracked factors plus the tracked factors in `accepted`.
fn solve_subset(graph: &FactorGraph, tracked: &BTreeSet<usize>, accepted: &BTreeSet<usize>, init: &Values, cfg: &SolverConfig) -> Result<Option<Values>, SolverError> {
    let mut g = FactorGraph::new();
    for (i, f) in graph.factors().iter().enumerate() {
        if !tracked.contains(&i) {
            g.add(f.clone());
        } else if accepted.contains(&i) {
            g.add(f.clone().with_kernel(RobustKernel::None));
        }
    }
    let r = optimize_batch(&g, init, cfg)?;
    Ok((r.status != SolveStatus::Singular).then_some(r.values))
}

fn passing(graph: &FactorGraph, among: &BTreeSet<usize>, values: &Values) -> Result<BTreeSet<usize>, SolverError> {
    let mut out = BTreeSet::new();
    for &f in among {
        let factor = graph.factor(f);
        if factor.squared_error(values)? < chi2_95(factor.dim()) {
            out.insert(f);
        }
    }
    Ok(out)
}

/// Turns the continuation's classification into a maximal jointly consistent set.
///
/// Accepted factors are re-solved without kernels and re-tested until
/// stable, then each rejected factor (smallest residual first) is kept if
/// the enlarged set still passes the χ² test at its own solution.
fn refine(graph: &FactorGraph, state: &mut RobustState, mut values: Values, cfg: &SolverConfig) -> Result<Values, SolverError> {
    let tracked: BTreeSet<usize> = state.entries.keys().copied().collect();
    let mut accepted: BTreeSet<usize> = state.entries.iter().filter(|(_, e)| e.inlier).map(|(f, _)| *f).collect();
    for _ in 0..REFINE_ROUNDS {
        let Some(sol) = solve_subset(graph, &tracked, &accepted, &values, cfg)? else {
            break;
        };
        let next = passing(graph, &tracked, &sol)?;
        values = sol;
        if next == accepted {
            break;
        }
        accepted = next;
    }
    loop {
        let mut rejected = Vec::new();
        for &f in tracked.difference(&accepted) {
            rejected.push((graph.factor(f).squared_error(&values)?, f));
        }
        rejected.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut grew = false;
        for (_, f) in rejected {
            let mut trial = accepted.clone();
            trial.insert(f);
            if let Some(sol) = solve_subset(graph, &tracked, &trial, &values, cfg)? {
                if passing(graph, &trial, &sol)?.len() == trial.len() {
                    accepted = trial;
                    values = sol;
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    state.classify(graph, &values, None)?;
    Ok(values)
}

/// Graduated non-convexity: one warm-started trust-region solve per μ stage.
pub fn optimize_gnc(graph: &FactorGraph, init: &Values, cfg: &SolverConfig) -> Result<(SolveReport, RobustState), SolverError> {
    cfg.validate()?;
    let mut state = RobustState::new();
    for f in 0..graph.len() {
        state.track(graph, f);
    }
    let active: BTreeSet<VariableKey> = graph.variables().copied().collect();
    let graduated = graph.factors().iter().any(|f| f.kernel().is_graduated());
    let stages = if graduated { cfg.mu_schedule.len() } else { 1 };
    let mut values = init.clone();
    let mut report = None;
    let mut iterations = 0;
    let mut initial_cost = None;
    for stage in 0..stages {
        let idx: Vec<usize> = state.entries.keys().copied().collect();
        for f in idx {
            state.set_stage(f, stage);
        }
        if active.is_empty() {
            break;
        }
        let sub = Subproblem::new(graph, &values, &active, &|f| state.kernel_for(graph, f, cfg))?;
        let r = sub.run(&values, cfg)?;
        iterations += r.iterations;
        initial_cost.get_or_insert(r.initial_cost);
        values = r.values.clone();
        let singular = r.status == SolveStatus::Singular;
        report = Some(r);
        if singular {
            break;
        }
    }
    state.classify(graph, &values, None)?;
    if report.is_some() && !state.is_empty() {
        values = refine(graph, &mut state, values, cfg)?;
    }
    let report = match report {
        Some(mut r) => {
            r.values = values;
            r.iterations = iterations;
            r.initial_cost = initial_cost.unwrap_or(r.initial_cost);
            r
        }
        None => SolveReport {
            values,
            status: SolveStatus::Converged,
            iterations: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
        },
    };
    Ok((report, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{Factor, NoiseModel, Value};
    use crate::solver::optimize_batch;

    fn priors(extra_at: f64) -> (FactorGraph, Values, usize) {
        let k = VariableKey::landmark(0);
        let mut g = FactorGraph::new();
        let n = NoiseModel::isotropic(1, 1.0).unwrap();
        for _ in 0..10 {
            g.add(Factor::prior_point(k, &[0.0], n.clone()).unwrap());
        }
        let gross = g.add(
            Factor::prior_point(k, &[extra_at], n)
                .unwrap()
                .with_kernel(RobustKernel::graduated(1))
                .as_outlier_candidate(),
        );
        (g, [(k, Value::point(&[0.0]))].into_iter().collect(), gross)
    }

    /// Brute-force maximum consensus over subsets of 1D unit-σ priors:
    /// the largest subset whose joint optimum keeps every member below χ²₁(0.95).
    fn max_consensus(points: &[f64]) -> Vec<bool> {
        let n = points.len();
        let mut best: (usize, u32) = (0, 0);
        for mask in 1u32..(1 << n) {
            let members: Vec<f64> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| points[i]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            if members.iter().all(|p| (p - mean).powi(2) < chi2_95(1)) && members.len() > best.0 {
                best = (members.len(), mask);
            }
        }
        (0..n).map(|i| best.1 & (1 << i) != 0).collect()
    }

    #[test]
    fn gross_prior_rejected() {
        let (g, init, gross) = priors(100.0);
        let (r, state) = optimize_gnc(&g, &init, &SolverConfig::default()).unwrap();
        let x = r.values.get(&VariableKey::landmark(0)).unwrap().as_point().unwrap()[0];
        assert!(x.abs() < 0.05, "{x}");
        assert!(!state.get(gross).unwrap().inlier);
        let mut pts = vec![0.0; 10];
        pts.push(100.0);
        assert_eq!(max_consensus(&pts), (0..11).map(|i| i < 10).collect::<Vec<_>>());
        assert_eq!(state.get(gross).unwrap().stage, 4);
    }

    #[test]
    fn scalar_sets_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let k = VariableKey::landmark(0);
        let n = NoiseModel::isotropic(1, 1.0).unwrap();
        let mut hits = 0;
        for seed in 0..40 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pts: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
            for p in pts.iter_mut().take(rng.random_range(0..3)) {
                *p = rng.random_range(-20.0..20.0);
            }
            let mut g = FactorGraph::new();
            for p in &pts {
                g.add(
                    Factor::prior_point(k, &[*p], n.clone())
                        .unwrap()
                        .with_kernel(RobustKernel::graduated(1))
                        .as_outlier_candidate(),
                );
            }
            let init: Values = [(k, Value::point(&[0.0]))].into_iter().collect();
            let (_, state) = optimize_gnc(&g, &init, &SolverConfig::default()).unwrap();
            let got: Vec<bool> = (0..pts.len()).map(|i| state.get(i).unwrap().inlier).collect();
            let best = max_consensus(&pts);
            if got.iter().filter(|b| **b).count() == best.iter().filter(|b| **b).count() {
                hits += 1;
            }
        }
        assert!(hits >= 38, "{hits}/40");
    }

    #[test]
    fn consistent_prior_kept() {
        let (g, init, gross) = priors(0.5);
        let (r, state) = optimize_gnc(&g, &init, &SolverConfig::default()).unwrap();
        assert!(state.get(gross).unwrap().inlier);
        for f in g.factors() {
            assert!(f.squared_error(&r.values).unwrap() < chi2_95(1));
        }
    }

    #[test]
    fn no_candidates_equals_batch() {
        let k = VariableKey::landmark(0);
        let mut g = FactorGraph::new();
        let n = NoiseModel::isotropic(1, 1.0).unwrap();
        g.add(Factor::prior_point(k, &[1.0], n.clone()).unwrap());
        g.add(Factor::prior_point(k, &[2.0], n).unwrap());
        let init: Values = [(k, Value::point(&[9.0]))].into_iter().collect();
        let (r, state) = optimize_gnc(&g, &init, &SolverConfig::default()).unwrap();
        let b = optimize_batch(&g, &init, &SolverConfig::default()).unwrap();
        assert_eq!(r.values, b.values);
        assert!(state.is_empty());
    }
}
