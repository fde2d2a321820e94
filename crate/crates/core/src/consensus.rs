//! Consensus-ADMM layer: constraint functions, edge/dual/penalty stores,
//! weighted biased priors and the batch MESA+ iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::factors::{Factor, NoiseModel, RobotId, RobustKernel, Value, Values, VariableKey};
use crate::manifold::{ManifoldError, Pose, Rotation};
use crate::solver::{optimize_batch, FactorGraph, SolverConfig, SolverError};

/// Dual decay used by riMESA.
pub const DUAL_DECAY: f64 = 0.9;
/// Penalty of a biased prior that has not yet been initialized by communication.
pub const BETA_UNINIT: f64 = 1e-4;
/// Penalty of an initialized biased prior.
pub const BETA_INIT: f64 = 1.0;
/// Σ_s rotation weight (radians).
pub const SIGMA_ROTATION: f64 = 0.1;
/// Σ_s translation weight (meters).
pub const SIGMA_TRANSLATION: f64 = 1.0;
/// Per-iteration penalty growth α for the batch baseline.
pub const BATCH_PENALTY_GROWTH: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("constraint {constraint:?} cannot compare the given state and edge variable")]
    DomainMismatch { constraint: ConstraintFunction },
    #[error("no store entry for neighbor {neighbor}, variable {key}")]
    MissingEntry { neighbor: RobotId, key: VariableKey },
    #[error("store entry for neighbor {neighbor}, variable {key} already exists")]
    DuplicateEntry { neighbor: RobotId, key: VariableKey },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("local solve failed on robot {robot}: {source}")]
    Solver {
        robot: RobotId,
        #[source]
        source: Box<SolverError>,
    },
    #[error("communication schedule is empty")]
    EmptySchedule,
    #[error("unknown robot {0} in schedule")]
    UnknownRobot(RobotId),
}

/// How a local copy θ is compared with an edge variable z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConstraintFunction {
    /// `Log(z⁻¹ ∘ θ)`.
    #[default]
    Geodesic,
    /// `Log(θ) − z`.
    ApxGeodesic,
    /// Rotation and translation compared separately.
    Split,
    /// `Vec(θ) − z`.
    Chordal,
    /// `θ − z` for vector-valued variables.
    Linear,
}

/// The edge variable z, in the domain its constraint function expects.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeValue {
    Pose(Pose),
    Vector(DVector<f64>),
}

fn mismatch(cf: ConstraintFunction) -> ConsensusError {
    ConsensusError::DomainMismatch { constraint: cf }
}

impl ConstraintFunction {
    /// Vector-valued variables always use the linear constraint.
    pub fn for_value(self, theta: &Value) -> ConstraintFunction {
        match theta {
            Value::Point(_) => ConstraintFunction::Linear,
            Value::Pose(_) => self,
        }
    }

    pub fn residual_dim(self, theta: &Value) -> usize {
        match (self, theta) {
            (ConstraintFunction::Chordal, Value::Pose(p)) => p.dim() * p.dim() + p.dim(),
            _ => theta.tangent_dim(),
        }
    }

    /// The z with `q(θ, z) = 0`.
    pub fn edge_init(self, theta: &Value) -> Result<EdgeValue, ConsensusError> {
        match (self, theta) {
            (ConstraintFunction::Geodesic | ConstraintFunction::Split, Value::Pose(p)) => Ok(EdgeValue::Pose(*p)),
            (ConstraintFunction::ApxGeodesic, Value::Pose(p)) => Ok(EdgeValue::Vector(p.log()?.into_inner())),
            (ConstraintFunction::Chordal, Value::Pose(p)) => Ok(EdgeValue::Vector(p.chordal_vec())),
            (ConstraintFunction::Linear, Value::Point(v)) => Ok(EdgeValue::Vector(v.clone())),
            _ => Err(mismatch(self)),
        }
    }

    /// Σ_s as a diagonal noise model over the constraint residual.
    pub fn weights(self, theta: &Value, sigma_r: f64, sigma_t: f64) -> NoiseModel {
        let sigmas: Vec<f64> = match (self, theta) {
            (ConstraintFunction::Chordal, Value::Pose(p)) => {
                let n = p.dim();
                (0..n * n + n).map(|i| if i < n * n { sigma_r } else { sigma_t }).collect()
            }
            (_, Value::Pose(p)) => {
                let rot = p.rotation().tangent_dim();
                (0..p.tangent_dim()).map(|i| if i < rot { sigma_r } else { sigma_t }).collect()
            }
            (_, Value::Point(v)) => vec![sigma_t; v.len()],
        };
        NoiseModel::diagonal(&sigmas).expect("positive Σ_s weights")
    }
}

/// `q(θ, z)` for the given constraint function.
pub fn constraint_residual(cf: ConstraintFunction, theta: &Value, z: &EdgeValue) -> Result<DVector<f64>, ConsensusError> {
    let check = |a: usize, b: usize| {
        if a == b {
            Ok(())
        } else {
            Err(ConsensusError::Manifold(ManifoldError::DimensionMismatch { expected: a, actual: b }))
        }
    };
    match (cf, theta, z) {
        (ConstraintFunction::Geodesic, Value::Pose(t), EdgeValue::Pose(z)) => {
            check(z.dim(), t.dim())?;
            Ok(z.local(t)?.into_inner())
        }
        (ConstraintFunction::Split, Value::Pose(t), EdgeValue::Pose(z)) => {
            check(z.dim(), t.dim())?;
            let rot = z.rotation().inverse().compose(t.rotation()).log();
            let d = t.dim();
            let dt = t.translation() - z.translation();
            Ok(DVector::from_iterator(rot.len() + d, rot.iter().copied().chain(dt.iter().take(d).copied())))
        }
        (ConstraintFunction::ApxGeodesic, Value::Pose(t), EdgeValue::Vector(z)) => {
            let l = t.log()?.into_inner();
            check(l.len(), z.len())?;
            Ok(l - z)
        }
        (ConstraintFunction::Chordal, Value::Pose(t), EdgeValue::Vector(z)) => {
            let v = t.chordal_vec();
            check(v.len(), z.len())?;
            Ok(v - z)
        }
        (ConstraintFunction::Linear, Value::Point(t), EdgeValue::Vector(z)) => {
            check(t.len(), z.len())?;
            Ok(t - z)
        }
        _ => Err(mismatch(cf)),
    }
}

fn rotation_bits(r: &Rotation) -> Vec<u64> {
    match r {
        Rotation::Planar(a) => vec![a.to_bits()],
        Rotation::Spatial(q) => q.coords.iter().map(|c| c.to_bits()).collect(),
    }
}

fn pose_bits(p: &Pose) -> Vec<u64> {
    let mut b: Vec<u64> = p.translation().iter().map(|c| c.to_bits()).collect();
    b.extend(rotation_bits(p.rotation()));
    b
}

/// Closed-form edge variable update from the two robots' estimates.
///
/// The result depends only on the unordered pair `{θ_i, θ_j}`, so both
/// robots compute bit-identical values from the same transmitted data.
pub fn edge_update(cf: ConstraintFunction, theta_i: &Value, theta_j: &Value) -> Result<EdgeValue, ConsensusError> {
    match (cf, theta_i, theta_j) {
        (ConstraintFunction::Geodesic | ConstraintFunction::Split, Value::Pose(a), Value::Pose(b)) => {
            let (a, b) = if pose_bits(a) <= pose_bits(b) { (a, b) } else { (b, a) };
            Ok(EdgeValue::Pose(Pose::split_interpolate(a, b, 0.5)?))
        }
        (ConstraintFunction::ApxGeodesic, Value::Pose(a), Value::Pose(b)) => {
            let (la, lb) = (a.log()?.into_inner(), b.log()?.into_inner());
            Ok(EdgeValue::Vector((la + lb) * 0.5))
        }
        (ConstraintFunction::Chordal, Value::Pose(a), Value::Pose(b)) => {
            Ok(EdgeValue::Vector((a.chordal_vec() + b.chordal_vec()) * 0.5))
        }
        (ConstraintFunction::Linear, Value::Point(a), Value::Point(b)) if a.len() == b.len() => {
            Ok(EdgeValue::Vector((a + b) * 0.5))
        }
        _ => Err(mismatch(cf)),
    }
}

/// `λ' = decay·λ + β·q`.
pub fn dual_update(lambda: &DVector<f64>, beta: f64, q: &DVector<f64>, decay: f64) -> DVector<f64> {
    assert_eq!(lambda.len(), q.len(), "dual and residual dimensions differ");
    lambda * decay + q * beta
}

/// A value shared between a store and the biased priors reading it.
pub type Shared<T> = Arc<RwLock<T>>;

fn read<T: Clone>(s: &Shared<T>) -> T {
    s.read().unwrap_or_else(|e| e.into_inner()).clone()
}

fn write<T>(s: &Shared<T>, v: T) {
    *s.write().unwrap_or_else(|e| e.into_inner()) = v;
}

/// Map `(neighbor, shared key) → value`, handing out live references.
#[derive(Debug)]
pub struct Store<T> {
    entries: BTreeMap<(RobotId, VariableKey), Shared<T>>,
}

pub type EdgeStore = Store<EdgeValue>;
pub type DualStore = Store<DVector<f64>>;
pub type PenaltyStore = Store<f64>;

impl<T> Default for Store<T> {
    fn default() -> Self {
        Store { entries: BTreeMap::new() }
    }
}

impl<T: Clone> Store<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, neighbor: RobotId, key: VariableKey, value: T) -> Result<Shared<T>, ConsensusError> {
        if self.entries.contains_key(&(neighbor, key)) {
            return Err(ConsensusError::DuplicateEntry { neighbor, key });
        }
        let s = Arc::new(RwLock::new(value));
        self.entries.insert((neighbor, key), Arc::clone(&s));
        Ok(s)
    }

    pub fn handle(&self, neighbor: RobotId, key: VariableKey) -> Result<Shared<T>, ConsensusError> {
        self.entries
            .get(&(neighbor, key))
            .cloned()
            .ok_or(ConsensusError::MissingEntry { neighbor, key })
    }

    pub fn get(&self, neighbor: RobotId, key: VariableKey) -> Option<T> {
        self.entries.get(&(neighbor, key)).map(read)
    }

    pub fn set(&self, neighbor: RobotId, key: VariableKey, value: T) -> Result<(), ConsensusError> {
        let s = self
            .entries
            .get(&(neighbor, key))
            .ok_or(ConsensusError::MissingEntry { neighbor, key })?;
        write(s, value);
        Ok(())
    }

    pub fn remove(&mut self, neighbor: RobotId, key: VariableKey) -> Option<T> {
        self.entries.remove(&(neighbor, key)).map(|s| read(&s))
    }

    pub fn contains(&self, neighbor: RobotId, key: VariableKey) -> bool {
        self.entries.contains_key(&(neighbor, key))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(RobotId, VariableKey)> {
        self.entries.keys()
    }

    /// Detached copy of every value.
    pub fn snapshot(&self) -> BTreeMap<(RobotId, VariableKey), T> {
        self.entries.iter().map(|(k, v)| (*k, read(v))).collect()
    }
}

/// A weighted biased prior on one shared variable, reading z, λ and β live.
#[derive(Debug, Clone)]
pub struct BiasedPriorSpec {
    key: VariableKey,
    neighbor: RobotId,
    constraint: ConstraintFunction,
    edge: Shared<EdgeValue>,
    dual: Shared<DVector<f64>>,
    penalty: Shared<f64>,
    weights: NoiseModel,
}

impl BiasedPriorSpec {
    pub fn new(
        key: VariableKey,
        neighbor: RobotId,
        constraint: ConstraintFunction,
        stores: (&EdgeStore, &DualStore, &PenaltyStore),
        weights: NoiseModel,
    ) -> Result<Self, ConsensusError> {
        Ok(BiasedPriorSpec {
            key,
            neighbor,
            constraint,
            edge: stores.0.handle(neighbor, key)?,
            dual: stores.1.handle(neighbor, key)?,
            penalty: stores.2.handle(neighbor, key)?,
            weights,
        })
    }

    pub fn key(&self) -> VariableKey {
        self.key
    }

    pub fn neighbor(&self) -> RobotId {
        self.neighbor
    }

    pub fn constraint(&self) -> ConstraintFunction {
        self.constraint
    }

    pub fn weights(&self) -> &NoiseModel {
        &self.weights
    }

    pub fn penalty(&self) -> f64 {
        read(&self.penalty)
    }

    /// Unwhitened `√(β/2)·(q(θ, z) + λ/β)`.
    pub fn error(&self, theta: &Value) -> Result<DVector<f64>, ConsensusError> {
        let beta = read(&self.penalty);
        let q = {
            let z = self.edge.read().unwrap_or_else(|e| e.into_inner());
            constraint_residual(self.constraint, theta, &z)?
        };
        let lambda = self.dual.read().unwrap_or_else(|e| e.into_inner());
        if lambda.len() != q.len() {
            return Err(ManifoldError::DimensionMismatch {
                expected: q.len(),
                actual: lambda.len(),
            }
            .into());
        }
        Ok((q + &*lambda / beta) * (beta / 2.0).sqrt())
    }

    /// Closed-form Jacobian of [`error`](Self::error) where one exists: linear constraints and planar split.
    pub fn jacobian(&self, theta: &Value) -> Option<DMatrix<f64>> {
        let s = (read(&self.penalty) / 2.0).sqrt();
        match (self.constraint, theta) {
            (ConstraintFunction::Linear, Value::Point(t)) => Some(DMatrix::identity(t.len(), t.len()) * s),
            (ConstraintFunction::Split, Value::Pose(p)) if p.dim() == 2 => {
                let r = p.rotation().matrix3();
                let mut j = DMatrix::zeros(3, 3);
                j[(0, 0)] = 1.0;
                for a in 0..2 {
                    for b in 0..2 {
                        j[(1 + a, 1 + b)] = r[(a, b)];
                    }
                }
                Some(j * s)
            }
            _ => None,
        }
    }
}

/// Whitened `√(β/2)·Σ_s^{-1/2}·(q(θ, z) + λ/β)`.
pub fn biased_prior_residual(spec: &BiasedPriorSpec, theta: &Value) -> Result<DVector<f64>, ConsensusError> {
    Ok(spec.weights.whiten(&spec.error(theta)?))
}

/// Tangent-norm distance between two estimates of the same variable.
pub fn disagreement(a: &Value, b: &Value) -> Result<f64, ConsensusError> {
    Ok(b.local_from(a)?.norm())
}

/// One robot's batch subproblem.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub robot: RobotId,
    pub graph: FactorGraph,
    pub init: Values,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MesaPlusConfig {
    pub alpha: f64,
    pub beta0: f64,
    pub tolerance: f64,
    pub constraint: ConstraintFunction,
    pub sigma_r: f64,
    pub sigma_t: f64,
    pub solver: SolverConfig,
}

impl Default for MesaPlusConfig {
    fn default() -> Self {
        MesaPlusConfig {
            alpha: 1.0,
            beta0: BETA_INIT,
            tolerance: 1e-4,
            constraint: ConstraintFunction::Geodesic,
            sigma_r: SIGMA_ROTATION,
            sigma_t: SIGMA_TRANSLATION,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MesaPlusResult {
    pub estimates: BTreeMap<RobotId, Values>,
    /// Pair iterations executed.
    pub iterations: usize,
    pub converged: bool,
    pub max_disagreement: f64,
}

struct MesaAgent {
    graph: FactorGraph,
    values: Values,
    edges: EdgeStore,
    duals: DualStore,
    penalties: PenaltyStore,
    shared: BTreeMap<RobotId, BTreeSet<VariableKey>>,
    solved: bool,
}

impl MesaAgent {
    fn solve(&mut self, robot: RobotId, cfg: &SolverConfig) -> Result<(), ConsensusError> {
        let report = optimize_batch(&self.graph, &self.values, cfg).map_err(|e| ConsensusError::Solver {
            robot,
            source: Box::new(e),
        })?;
        self.values = report.values;
        self.solved = true;
        Ok(())
    }
}

/// Batch MESA+ over a schedule of communicating pairs.
///
/// Variables present in two robots' initial estimates are shared between
/// them. Stops once every shared variable agrees within `tolerance`, or when
/// the schedule is exhausted.
pub fn mesa_plus(
    problems: Vec<LocalProblem>,
    schedule: &[(RobotId, RobotId)],
    cfg: &MesaPlusConfig,
) -> Result<MesaPlusResult, ConsensusError> {
    if schedule.is_empty() {
        return Err(ConsensusError::EmptySchedule);
    }
    let mut agents: BTreeMap<RobotId, MesaAgent> = BTreeMap::new();
    for p in &problems {
        agents.insert(
            p.robot,
            MesaAgent {
                graph: p.graph.clone(),
                values: p.init.clone(),
                edges: EdgeStore::new(),
                duals: DualStore::new(),
                penalties: PenaltyStore::new(),
                shared: BTreeMap::new(),
                solved: false,
            },
        );
    }
    for &(i, j) in schedule {
        for r in [i, j] {
            if !agents.contains_key(&r) {
                return Err(ConsensusError::UnknownRobot(r));
            }
        }
    }

    let robots: Vec<RobotId> = agents.keys().copied().collect();
    for (a, &i) in robots.iter().enumerate() {
        for &j in &robots[a + 1..] {
            let common: BTreeSet<VariableKey> = agents[&i]
                .values
                .keys()
                .filter(|k| agents[&j].values.contains(k))
                .copied()
                .collect();
            if common.is_empty() {
                continue;
            }
            for (me, other) in [(i, j), (j, i)] {
                let agent = agents.get_mut(&me).expect("known robot");
                for &s in &common {
                    let theta = agent.values.get(&s).expect("shared key present").clone();
                    let cf = cfg.constraint.for_value(&theta);
                    agent.edges.insert(other, s, cf.edge_init(&theta)?)?;
                    agent.duals.insert(other, s, DVector::zeros(cf.residual_dim(&theta)))?;
                    agent.penalties.insert(other, s, cfg.beta0)?;
                    let spec = BiasedPriorSpec::new(
                        s,
                        other,
                        cf,
                        (&agent.edges, &agent.duals, &agent.penalties),
                        cf.weights(&theta, cfg.sigma_r, cfg.sigma_t),
                    )?;
                    agent.graph.add(Factor::biased_prior(spec, RobustKernel::None));
                }
                agent.shared.insert(other, common.clone());
            }
        }
    }

    let mut iterations = 0;
    let mut max_dis = max_disagreement(&agents)?;
    let mut converged = false;
    for &(i, j) in schedule {
        if i == j {
            continue;
        }
        iterations += 1;
        for r in [i, j] {
            agents.get_mut(&r).expect("known robot").solve(r, &cfg.solver)?;
        }
        let shared = agents[&i].shared.get(&j).cloned().unwrap_or_default();
        for s in &shared {
            let ti = agents[&i].values.get(s).expect("shared key present").clone();
            let tj = agents[&j].values.get(s).expect("shared key present").clone();
            let cf = cfg.constraint.for_value(&ti);
            let z = edge_update(cf, &ti, &tj)?;
            for (me, other, theta) in [(i, j, &ti), (j, i, &tj)] {
                let agent = &agents[&me];
                let q = constraint_residual(cf, theta, &z)?;
                let beta = agent.penalties.get(other, *s).ok_or(ConsensusError::MissingEntry { neighbor: other, key: *s })?;
                let lambda = agent.duals.get(other, *s).ok_or(ConsensusError::MissingEntry { neighbor: other, key: *s })?;
                agent.edges.set(other, *s, z.clone())?;
                agent.duals.set(other, *s, dual_update(&lambda, beta, &q, 1.0))?;
                agent.penalties.set(other, *s, cfg.alpha * beta)?;
            }
        }
        max_dis = max_disagreement(&agents)?;
        if max_dis < cfg.tolerance {
            converged = true;
            break;
        }
    }
    for (r, agent) in agents.iter_mut() {
        if !agent.solved {
            agent.solve(*r, &cfg.solver)?;
        }
    }
    Ok(MesaPlusResult {
        estimates: agents.into_iter().map(|(r, a)| (r, a.values)).collect(),
        iterations,
        converged,
        max_disagreement: max_dis,
    })
}

fn max_disagreement(agents: &BTreeMap<RobotId, MesaAgent>) -> Result<f64, ConsensusError> {
    let mut worst: f64 = 0.0;
    for (i, a) in agents {
        for (j, keys) in &a.shared {
            if j <= i {
                continue;
            }
            for s in keys {
                let (Some(x), Some(y)) = (a.values.get(s), agents[j].values.get(s)) else {
                    continue;
                };
                worst = worst.max(disagreement(x, y)?);
            }
        }
    }
    Ok(worst)
}
