//! Per-robot riMESA state machine.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Vector3};
use thiserror::Error;

use crate::consensus::{
    constraint_residual, dual_update, edge_update, BiasedPriorSpec, ConsensusError, ConstraintFunction, DualStore,
    EdgeStore, PenaltyStore, BETA_INIT, BETA_UNINIT, DUAL_DECAY, SIGMA_ROTATION, SIGMA_TRANSLATION,
};
use crate::factors::{Factor, Measurement, RobotId, RobustKernel, Value, Values, VariableKey, GM_SHAPE_KIMESA};
use crate::manifold::Pose;
use crate::solver::{FactorGraph, IncrementalSolver, RobustState, SolverConfig, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("variable {key} is already registered as shared with robot {neighbor}")]
    AlreadyRegistered { neighbor: RobotId, key: VariableKey },
    #[error("no estimate for {0}")]
    MissingInit(VariableKey),
    #[error("communication result for robot {got} delivered to robot {expected}")]
    Misaddressed { expected: RobotId, got: RobotId },
    #[error("robot {0} cannot communicate with itself")]
    SelfCommunication(RobotId),
}

/// Which robust kernel an agent puts on outlier candidates and biased priors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum KernelMode {
    #[default]
    Graduated,
    GemanMcClure(f64),
    None,
}

impl KernelMode {
    pub fn kernel(self, dim: usize) -> RobustKernel {
        match self {
            KernelMode::Graduated => RobustKernel::graduated(dim),
            KernelMode::GemanMcClure(c) => RobustKernel::GemanMcClure { c },
            KernelMode::None => RobustKernel::None,
        }
    }

    pub fn kimesa() -> Self {
        KernelMode::GemanMcClure(GM_SHAPE_KIMESA)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub constraint: ConstraintFunction,
    pub sigma_r: f64,
    pub sigma_t: f64,
    pub decay: f64,
    pub beta_uninit: f64,
    pub beta_init: f64,
    pub kernel: KernelMode,
    pub solver: SolverConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            constraint: ConstraintFunction::Geodesic,
            sigma_r: SIGMA_ROTATION,
            sigma_t: SIGMA_TRANSLATION,
            decay: DUAL_DECAY,
            beta_uninit: BETA_UNINIT,
            beta_init: BETA_INIT,
            kernel: KernelMode::Graduated,
            solver: SolverConfig::default(),
        }
    }
}

/// Which blocks of a variable's state local measurements pin down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ObservabilityMask {
    pub rotation: bool,
    pub translation: bool,
}

impl ObservabilityMask {
    pub const FULL: ObservabilityMask = ObservabilityMask { rotation: true, translation: true };
    pub const NONE: ObservabilityMask = ObservabilityMask { rotation: false, translation: false };
    pub const TRANSLATION: ObservabilityMask = ObservabilityMask { rotation: false, translation: true };

    pub fn union(self, other: ObservabilityMask) -> ObservabilityMask {
        ObservabilityMask {
            rotation: self.rotation || other.rotation,
            translation: self.translation || other.translation,
        }
    }

    /// What `factor` observes of the variable in slot `slot`.
    pub fn of_factor(factor: &Factor, slot: usize) -> ObservabilityMask {
        match factor.measurement() {
            Measurement::PriorPose(_) | Measurement::BetweenPose(_) => ObservabilityMask::FULL,
            Measurement::PriorPoint(_) => ObservabilityMask::TRANSLATION,
            Measurement::BearingRange { .. } | Measurement::LandmarkObs(_) if slot == 1 => ObservabilityMask::TRANSLATION,
            _ => ObservabilityMask::NONE,
        }
    }
}

/// Keeps locally observed blocks of `local` and takes the rest from `owner`.
pub fn robust_init(local: &Value, owner: &Value, mask: ObservabilityMask) -> Value {
    match (local, owner) {
        (Value::Pose(l), Value::Pose(o)) if l.dim() == o.dim() => {
            let rot = if mask.rotation { *l.rotation() } else { *o.rotation() };
            let t = if mask.translation { *l.translation() } else { *o.translation() };
            Value::Pose(Pose::from_parts(rot, t))
        }
        (Value::Point(_), Value::Point(_)) if !mask.translation => owner.clone(),
        _ => local.clone(),
    }
}

/// Initial guess for `key` from a factor whose other variables are known.
///
/// Blocks the factor does not observe default to identity rotation / zero
/// translation, except that a range target is placed at the measured range
/// along the observer's x-axis.
pub fn seed_estimate(factor: &Factor, values: &Values, key: &VariableKey) -> Option<Value> {
    let keys = factor.keys();
    let slot = keys.iter().position(|k| k == key)?;
    let other = keys.get(1 - slot.min(1)).and_then(|k| values.get(k));
    match (factor.measurement(), slot) {
        (Measurement::PriorPose(m), _) => Some(Value::Pose(*m)),
        (Measurement::PriorPoint(m), _) => Some(Value::Point(m.clone())),
        (Measurement::BetweenPose(m), 1) => Some(Value::Pose(other?.as_pose()?.compose(m))),
        (Measurement::BetweenPose(m), 0) => Some(Value::Pose(other?.as_pose()?.compose(&m.inverse()))),
        (Measurement::Range(d), 1) => {
            let a = other?;
            let pos = match a {
                Value::Pose(p) => p.transform_point(&Vector3::new(*d, 0.0, 0.0)),
                Value::Point(_) => a.position() + Vector3::new(*d, 0.0, 0.0),
            };
            Some(Value::Pose(Pose::from_parts(a.as_pose()?.rotation_identity_like(), pos)))
        }
        (Measurement::BearingRange { bearing, range }, 1) => {
            let a = other?.as_pose()?;
            let local = if bearing.len() == 1 {
                Vector3::new(range * bearing[0].cos(), range * bearing[0].sin(), 0.0)
            } else {
                let h = range * bearing[1].cos();
                Vector3::new(h * bearing[0].cos(), h * bearing[0].sin(), range * bearing[1].sin())
            };
            Some(Value::Point(point_of(a, &a.transform_point(&local))))
        }
        (Measurement::LandmarkObs(m), 1) => {
            let a = other?.as_pose()?;
            let mut local = Vector3::zeros();
            for (i, c) in m.iter().take(3).enumerate() {
                local[i] = *c;
            }
            Some(Value::Point(point_of(a, &a.transform_point(&local))))
        }
        _ => None,
    }
}

fn point_of(frame: &Pose, p: &Vector3<f64>) -> DVector<f64> {
    DVector::from_iterator(frame.dim(), p.iter().take(frame.dim()).copied())
}

/// Frozen copy of the state a communication toward one neighbor works from.
#[derive(Debug, Clone, PartialEq)]
pub struct CommSnapshot {
    pub robot: RobotId,
    pub neighbor: RobotId,
    /// Θ̂: own variables, environment variables and everything shared with the neighbor.
    pub estimates: Values,
    pub shared: BTreeSet<VariableKey>,
    pub environment: BTreeSet<VariableKey>,
    pub pending: BTreeSet<VariableKey>,
    pub masks: BTreeMap<VariableKey, ObservabilityMask>,
}

/// Everything sent and received in one completed two-stage exchange, from one side's view.
#[derive(Debug, Clone, PartialEq)]
pub struct CommResult {
    pub robot: RobotId,
    pub neighbor: RobotId,
    pub local_shared: BTreeSet<VariableKey>,
    pub remote_shared: BTreeSet<VariableKey>,
    pub local_environment: BTreeSet<VariableKey>,
    pub remote_environment: BTreeSet<VariableKey>,
    pub local_pending: BTreeSet<VariableKey>,
    pub remote_pending: BTreeSet<VariableKey>,
    pub local_masks: BTreeMap<VariableKey, ObservabilityMask>,
    pub remote_masks: BTreeMap<VariableKey, ObservabilityMask>,
    /// Ŝ_j ∪ Ŝ_i ∪ (Ê ∩ Ê′).
    pub joint: BTreeSet<VariableKey>,
    pub local_estimates: Values,
    pub remote_estimates: Values,
}

const KEY_BYTES: usize = 16;

impl CommResult {
    /// Approximate wire size of both stages in bytes.
    pub fn payload_bytes(&self) -> usize {
        let sets = self.local_shared.len()
            + self.remote_shared.len()
            + self.local_environment.len()
            + self.remote_environment.len()
            + self.local_pending.len()
            + self.remote_pending.len();
        let masks = self.local_masks.len() + self.remote_masks.len();
        let est: usize = self
            .local_estimates
            .iter()
            .chain(self.remote_estimates.iter())
            .map(|(_, v)| KEY_BYTES + 8 * v.tangent_dim())
            .sum();
        sets * KEY_BYTES + masks * (KEY_BYTES + 1) + est
    }
}

/// Runs both stages of the pairwise protocol on two snapshots.
pub fn exchange(a: &CommSnapshot, b: &CommSnapshot) -> Result<(CommResult, CommResult), AgentError> {
    if a.robot == b.robot {
        return Err(AgentError::SelfCommunication(a.robot));
    }
    if a.neighbor != b.robot {
        return Err(AgentError::Misaddressed { expected: a.neighbor, got: b.robot });
    }
    if b.neighbor != a.robot {
        return Err(AgentError::Misaddressed { expected: b.neighbor, got: a.robot });
    }
    let mut joint: BTreeSet<VariableKey> = a.shared.union(&b.shared).copied().collect();
    joint.extend(a.environment.intersection(&b.environment).copied());
    let restrict = |s: &CommSnapshot| -> Values {
        joint
            .iter()
            .filter_map(|k| s.estimates.get(k).map(|v| (*k, v.clone())))
            .collect()
    };
    let (ea, eb) = (restrict(a), restrict(b));
    let view = |me: &CommSnapshot, other: &CommSnapshot, mine: &Values, theirs: &Values| CommResult {
        robot: me.robot,
        neighbor: other.robot,
        local_shared: me.shared.clone(),
        remote_shared: other.shared.clone(),
        local_environment: me.environment.clone(),
        remote_environment: other.environment.clone(),
        local_pending: me.pending.clone(),
        remote_pending: other.pending.clone(),
        local_masks: me.masks.clone(),
        remote_masks: other.masks.clone(),
        joint: joint.clone(),
        local_estimates: mine.clone(),
        remote_estimates: theirs.clone(),
    };
    Ok((view(a, b, &ea, &eb), view(b, a, &eb, &ea)))
}

/// One robot's complete riMESA state.
#[derive(Debug)]
pub struct AgentState {
    id: RobotId,
    config: AgentConfig,
    solver: IncrementalSolver,
    shared: BTreeMap<RobotId, BTreeSet<VariableKey>>,
    pending: BTreeMap<RobotId, BTreeSet<VariableKey>>,
    environment: BTreeSet<VariableKey>,
    duals: DualStore,
    edges: EdgeStore,
    penalties: PenaltyStore,
    cache: Vec<Factor>,
    reelim: BTreeSet<VariableKey>,
    cvx: BTreeSet<VariableKey>,
    masks: BTreeMap<VariableKey, ObservabilityMask>,
}

impl AgentState {
    pub fn new(id: RobotId, config: AgentConfig) -> Result<Self, AgentError> {
        let solver = IncrementalSolver::new(config.solver.clone())?;
        Ok(AgentState {
            id,
            config,
            solver,
            shared: BTreeMap::new(),
            pending: BTreeMap::new(),
            environment: BTreeSet::new(),
            duals: DualStore::new(),
            edges: EdgeStore::new(),
            penalties: PenaltyStore::new(),
            cache: Vec::new(),
            reelim: BTreeSet::new(),
            cvx: BTreeSet::new(),
            masks: BTreeMap::new(),
        })
    }

    pub fn id(&self) -> RobotId {
        self.id
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn estimate(&self) -> &Values {
        self.solver.values()
    }

    pub fn graph(&self) -> &FactorGraph {
        self.solver.graph()
    }

    pub fn robust_state(&self) -> &RobustState {
        self.solver.robust_state()
    }

    pub fn shared_with(&self, neighbor: RobotId) -> BTreeSet<VariableKey> {
        self.shared.get(&neighbor).cloned().unwrap_or_default()
    }

    pub fn neighbors(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.shared.keys().copied()
    }

    pub fn pending(&self, neighbor: RobotId) -> BTreeSet<VariableKey> {
        self.pending.get(&neighbor).cloned().unwrap_or_default()
    }

    pub fn environment(&self) -> &BTreeSet<VariableKey> {
        &self.environment
    }

    pub fn duals(&self) -> &DualStore {
        &self.duals
    }

    pub fn edges(&self) -> &EdgeStore {
        &self.edges
    }

    pub fn penalties(&self) -> &PenaltyStore {
        &self.penalties
    }

    pub fn cached_priors(&self) -> usize {
        self.cache.len()
    }

    pub fn reelim_set(&self) -> &BTreeSet<VariableKey> {
        &self.reelim
    }

    pub fn cvx_set(&self) -> &BTreeSet<VariableKey> {
        &self.cvx
    }

    pub fn masks(&self) -> &BTreeMap<VariableKey, ObservabilityMask> {
        &self.masks
    }

    /// Local variables connected to `key` through a factor.
    pub fn connections(&self, key: &VariableKey) -> BTreeSet<VariableKey> {
        self.solver.graph().neighbors(key)
    }

    fn is_foreign(&self, key: &VariableKey) -> Option<RobotId> {
        key.robot().filter(|r| *r != self.id)
    }

    /// Registers environment variables and shared variables with their consensus state.
    ///
    /// With `observed` set, the observability masks of the new shared keys are recorded.
    pub fn bookkeep(
        &mut self,
        env_new: &BTreeSet<VariableKey>,
        shared_new: &BTreeMap<RobotId, BTreeSet<VariableKey>>,
        inits: &Values,
        observed: Option<&BTreeMap<VariableKey, ObservabilityMask>>,
    ) -> Result<(), AgentError> {
        for (&j, keys) in shared_new {
            if j == self.id {
                return Err(AgentError::SelfCommunication(j));
            }
            for &s in keys {
                if self.shared.get(&j).is_some_and(|set| set.contains(&s)) || self.duals.contains(j, s) {
                    return Err(AgentError::AlreadyRegistered { neighbor: j, key: s });
                }
                if inits.get(&s).or_else(|| self.solver.values().get(&s)).is_none() {
                    return Err(AgentError::MissingInit(s));
                }
            }
        }
        self.environment.extend(env_new.iter().copied());
        for (&j, keys) in shared_new {
            for &s in keys {
                let theta = inits.get(&s).or_else(|| self.solver.values().get(&s)).expect("checked").clone();
                let cf = self.config.constraint.for_value(&theta);
                self.edges.insert(j, s, cf.edge_init(&theta)?)?;
                self.duals.insert(j, s, DVector::zeros(cf.residual_dim(&theta)))?;
                self.penalties.insert(j, s, self.config.beta_uninit)?;
                let weights = cf.weights(&theta, self.config.sigma_r, self.config.sigma_t);
                let spec = BiasedPriorSpec::new(s, j, cf, (&self.edges, &self.duals, &self.penalties), weights)?;
                let dim = spec.weights().dim();
                self.cache.push(Factor::biased_prior(spec, self.config.kernel.kernel(dim)));
                self.shared.entry(j).or_default().insert(s);
                if s.robot() == Some(j) {
                    self.pending.entry(j).or_default().insert(s);
                }
                if let Some(m) = observed.and_then(|o| o.get(&s)) {
                    let e = self.masks.entry(s).or_default();
                    *e = e.union(*m);
                }
            }
        }
        Ok(())
    }

    /// Adds new measurements and variables, then runs the incremental robust solver.
    ///
    /// Outlier candidates get this agent's kernel. New factors are appended
    /// to the graph in order, ahead of any cached biased priors.
    pub fn update(&mut self, new_factors: Vec<Factor>, new_inits: Values) -> Result<&Values, AgentError> {
        let mut env_new = BTreeSet::new();
        let mut shared_new: BTreeMap<RobotId, BTreeSet<VariableKey>> = BTreeMap::new();
        let mut observed: BTreeMap<VariableKey, ObservabilityMask> = BTreeMap::new();
        let mut factors = Vec::with_capacity(new_factors.len() + self.cache.len());
        for mut f in new_factors {
            if f.is_outlier_candidate() {
                f.set_kernel(self.config.kernel.kernel(f.dim()));
            }
            for (slot, k) in f.keys().iter().enumerate() {
                if k.is_environment() {
                    if !self.environment.contains(k) {
                        env_new.insert(*k);
                    }
                } else if let Some(j) = self.is_foreign(k) {
                    if !self.shared.get(&j).is_some_and(|s| s.contains(k)) {
                        shared_new.entry(j).or_default().insert(*k);
                    }
                } else {
                    continue;
                }
                let m = observed.entry(*k).or_default();
                *m = m.union(ObservabilityMask::of_factor(&f, slot));
            }
            factors.push(f);
        }
        let backup_cache = self.cache.len();
        let backup_env = self.environment.clone();
        self.bookkeep(&env_new, &shared_new, &new_inits, Some(&observed))?;
        let newly_cached = self.cache.len() - backup_cache;
        factors.extend(self.cache.iter().cloned());
        match self.solver.update(factors, new_inits, &self.reelim, &self.cvx) {
            Ok(_) => {
                for (k, m) in observed {
                    if self.masks.contains_key(&k) || self.is_foreign(&k).is_some() {
                        let e = self.masks.entry(k).or_default();
                        *e = e.union(m);
                    }
                }
                self.cache.clear();
                self.reelim.clear();
                self.cvx.clear();
                Ok(self.solver.values())
            }
            Err(e) => {
                self.unregister(&shared_new, newly_cached, backup_env);
                Err(e.into())
            }
        }
    }

    fn unregister(&mut self, shared_new: &BTreeMap<RobotId, BTreeSet<VariableKey>>, newly_cached: usize, env: BTreeSet<VariableKey>) {
        self.cache.truncate(self.cache.len() - newly_cached);
        self.environment = env;
        for (j, keys) in shared_new {
            for s in keys {
                self.edges.remove(*j, *s);
                self.duals.remove(*j, *s);
                self.penalties.remove(*j, *s);
                self.masks.remove(s);
                if let Some(set) = self.shared.get_mut(j) {
                    set.remove(s);
                }
                if let Some(set) = self.pending.get_mut(j) {
                    set.remove(s);
                }
            }
        }
        self.shared.retain(|_, s| !s.is_empty());
        self.pending.retain(|_, s| !s.is_empty());
    }

    /// Freezes the state a communication toward `neighbor` will use.
    pub fn begin_communication(&self, neighbor: RobotId) -> CommSnapshot {
        let shared = self.shared_with(neighbor);
        let pending = self.pending(neighbor);
        let estimates = self
            .solver
            .values()
            .iter()
            .filter(|(k, _)| self.is_foreign(k).is_none() || shared.contains(k))
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        let masks = pending
            .iter()
            .map(|k| (*k, self.masks.get(k).copied().unwrap_or_default()))
            .collect();
        CommSnapshot {
            robot: self.id,
            neighbor,
            estimates,
            shared,
            environment: self.environment.clone(),
            pending,
            masks,
        }
    }

    /// Applies a completed exchange: new shared keys, robust initialization,
    /// edge and dual updates, and penalty promotion.
    pub fn incorporate(&mut self, result: &CommResult) -> Result<(), AgentError> {
        if result.robot != self.id {
            return Err(AgentError::Misaddressed { expected: self.id, got: result.robot });
        }
        let j = result.neighbor;
        if j == self.id {
            return Err(AgentError::SelfCommunication(j));
        }
        let joint: BTreeSet<VariableKey> = result
            .joint
            .iter()
            .filter(|k| {
                result.local_estimates.contains(k) && result.remote_estimates.contains(k) && self.solver.values().contains(k)
            })
            .copied()
            .collect();

        let known = self.shared_with(j);
        let novel: BTreeSet<VariableKey> = joint.difference(&known).copied().collect();

        let mut mine = result.local_estimates.clone();
        let mut theirs = result.remote_estimates.clone();
        let mut live: Vec<(VariableKey, Value)> = Vec::new();
        let initialized: BTreeSet<VariableKey> = result.local_pending.intersection(&joint).copied().collect();
        for s in &initialized {
            let mask = result.local_masks.get(s).copied().unwrap_or_default();
            let owner = theirs.get(s).expect("joint key").clone();
            let cached = robust_init(mine.get(s).expect("joint key"), &owner, mask);
            mine.insert(*s, cached);
            let current = self.solver.values().get(s).expect("joint key");
            live.push((*s, robust_init(current, &owner, mask)));
        }
        for s in result.remote_pending.intersection(&joint) {
            let mask = result.remote_masks.get(s).copied().unwrap_or_default();
            let updated = robust_init(theirs.get(s).expect("joint key"), mine.get(s).expect("joint key"), mask);
            theirs.insert(*s, updated);
        }

        let mut updates = Vec::with_capacity(joint.len());
        for s in &joint {
            let (ti, tj) = (mine.get(s).expect("joint key"), theirs.get(s).expect("joint key"));
            let cf = self.config.constraint.for_value(ti);
            let z = edge_update(cf, ti, tj)?;
            let q = constraint_residual(cf, ti, &z)?;
            let (lambda, beta) = if novel.contains(s) {
                (DVector::zeros(q.len()), self.config.beta_uninit)
            } else {
                let missing = ConsensusError::MissingEntry { neighbor: j, key: *s };
                (
                    self.duals.get(j, *s).ok_or(missing.clone())?,
                    self.penalties.get(j, *s).ok_or(missing)?,
                )
            };
            updates.push((*s, z, dual_update(&lambda, beta, &q, self.config.decay)));
        }

        let current = self.solver.values().clone();
        self.bookkeep(&BTreeSet::new(), &[(j, novel)].into_iter().collect(), &current, None)?;
        for (s, v) in live {
            self.solver.set_value(s, v)?;
        }
        if let Some(p) = self.pending.get_mut(&j) {
            for s in &initialized {
                p.remove(s);
            }
            if p.is_empty() {
                self.pending.remove(&j);
            }
        }
        for (s, z, lambda) in updates {
            self.edges.set(j, s, z)?;
            self.duals.set(j, s, lambda)?;
            self.penalties.set(j, s, self.config.beta_init)?;
        }
        self.reelim.extend(joint.iter().copied());
        if !result.local_pending.is_empty() {
            for s in &joint {
                self.cvx.insert(*s);
                self.cvx.extend(self.connections(s));
            }
        }
        Ok(())
    }
}
