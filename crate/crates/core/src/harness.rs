//! Experiment orchestration: drives methods over a dataset and a simulated
//! network, and collects per-step metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::agent::{exchange, seed_estimate, AgentConfig, AgentError, AgentState, CommResult, CommSnapshot, KernelMode};
use crate::consensus::{mesa_plus, LocalProblem, MesaPlusConfig, BATCH_PENALTY_GROWTH};
use crate::data::{generate, DataError, Dataset, MeasurementClass, Payload, Record, ScenarioConfig};
use crate::eval::{step_metrics, EvalError, HistoryEntry, MetricReport, SolutionHistory, StepMetrics};
use crate::factors::{chi2_95, Factor, RobotId, RobustKernel, Value, Values, VariableKey, GM_SHAPE_INDEPENDENT};
use crate::netsim::{write_events, CommEvent, NetError, NetSim, NetworkConfig, Outcome};
use crate::solver::{optimize_batch, optimize_gnc, FactorGraph, SolverConfig};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "RIMESA_OUT_DIR";

/// Final-μ influence below which a graduated factor counts as an outlier.
pub const INFLUENCE_INLIER: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodKind {
    Rimesa,
    Kimesa,
    Imesa,
    MesaPlus,
    Independent,
    CentralizedOracle,
    CentralizedGnc,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Rimesa,
        MethodKind::Kimesa,
        MethodKind::Imesa,
        MethodKind::MesaPlus,
        MethodKind::Independent,
        MethodKind::CentralizedOracle,
        MethodKind::CentralizedGnc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Rimesa => "rimesa",
            MethodKind::Kimesa => "kimesa",
            MethodKind::Imesa => "imesa",
            MethodKind::MesaPlus => "mesa_plus",
            MethodKind::Independent => "independent",
            MethodKind::CentralizedOracle => "centralized_oracle",
            MethodKind::CentralizedGnc => "centralized_gnc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        MethodKind::ALL.into_iter().find(|m| m.name() == s)
    }

    fn is_distributed(self) -> bool {
        matches!(self, MethodKind::Rimesa | MethodKind::Kimesa | MethodKind::Imesa | MethodKind::Independent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Agent parameters for the incremental distributed methods.
    pub agent: AgentConfig,
    /// Parameters for the batch consensus baseline.
    pub mesa: MesaPlusConfig,
    /// Solver parameters for the centralized baselines.
    pub solver: SolverConfig,
    /// Injects a failure at this step (for exercising trial isolation).
    pub fault_step: Option<u64>,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        let kernel = match kind {
            MethodKind::Kimesa => KernelMode::kimesa(),
            MethodKind::Imesa => KernelMode::None,
            MethodKind::Independent => KernelMode::GemanMcClure(GM_SHAPE_INDEPENDENT),
            _ => KernelMode::Graduated,
        };
        MethodSpec {
            kind,
            agent: AgentConfig {
                kernel,
                ..AgentConfig::default()
            },
            mesa: MesaPlusConfig {
                alpha: BATCH_PENALTY_GROWTH,
                ..MesaPlusConfig::default()
            },
            solver: SolverConfig::default(),
            fault_step: None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Methods that see ground-truth outlier labels and drop outliers.
    pub fn oracle_filter(&self) -> bool {
        matches!(self.kind, MethodKind::Imesa | MethodKind::MesaPlus | MethodKind::CentralizedOracle)
    }

    /// Parses a comma-separated method list.
    pub fn parse_list(s: &str) -> Result<Vec<MethodSpec>, HarnessError> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                MethodKind::parse(t)
                    .map(MethodSpec::new)
                    .ok_or_else(|| HarnessError::Config(format!("unknown method `{t}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    File(PathBuf),
    Scenario(ScenarioConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Network parameters; its seed is replaced by `seed`.
    pub network: NetworkConfig,
    pub methods: Vec<MethodSpec>,
    pub output_dir: Option<PathBuf>,
    pub record_history: bool,
    /// Metrics and history are sampled every this many steps (and at the last step).
    pub history_every: u64,
    pub seed: u64,
    /// Runs robot updates and incorporations on one thread per robot.
    pub threaded: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::Scenario(ScenarioConfig::default().desk()),
            network: NetworkConfig::default(),
            methods: vec![MethodSpec::new(MethodKind::Rimesa)],
            output_dir: None,
            record_history: false,
            history_every: 1,
            seed: 0,
            threaded: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() {
            return Err(HarnessError::Config("no methods selected".into()));
        }
        if self.history_every == 0 {
            return Err(HarnessError::Config("history_every must be positive".into()));
        }
        self.network.validate()?;
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed,
            ..self.network.clone()
        }
    }
}

/// Applies `rc=`, `dc=`, `pc=`, `bc=`, `tg=` and `parallel=` overrides to a network config.
pub fn parse_network(spec: &str, base: &NetworkConfig) -> Result<NetworkConfig, HarnessError> {
    let mut cfg = base.clone();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("network setting `{item}` is not key=value")))?;
        let num = || v.parse::<f64>().map_err(|_| HarnessError::Config(format!("invalid number `{v}` for `{k}`")));
        match k {
            "rc" => cfg.rate = num()?,
            "dc" => cfg.max_range = num()?,
            "pc" => cfg.success = num()?,
            "bc" => {
                cfg.delay = v
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("delay must be a whole number of steps, got `{v}`")))?
            }
            "tg" => cfg.two_generals_rate = num()?,
            "parallel" => {
                cfg.parallel = v
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("parallel must be true or false, got `{v}`")))?
            }
            _ => return Err(HarnessError::Config(format!("unknown network key `{k}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub success: usize,
    pub one_sided: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: String,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    /// Wall-clock seconds of work per sampled step, aligned with the report series.
    pub timing: Vec<(u64, f64)>,
    pub history: Option<SolutionHistory>,
    pub comms: CommStats,
    /// Robot pairs that completed at least one two-sided exchange.
    pub connected_pairs: BTreeSet<(RobotId, RobotId)>,
    pub events: Vec<CommEvent>,
}

impl MethodOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dataset: String,
    pub seed: u64,
    pub outcomes: Vec<MethodOutcome>,
}

impl RunOutput {
    pub fn has_failures(&self) -> bool {
        self.outcomes.iter().any(MethodOutcome::failed)
    }

    pub fn outcome(&self, method: &str) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset, HarnessError> {
    Ok(match source {
        DatasetSource::File(p) => Dataset::load(p)?,
        DatasetSource::Scenario(s) => generate(s)?,
    })
}

/// Runs every configured method and writes outputs when an output directory is set.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let out = run_on(&ds, cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

/// Runs every configured method on an already loaded dataset.
pub fn run_on(ds: &Dataset, cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let net = cfg.network();
    NetSim::new(net.clone())?;
    let outcomes = cfg
        .methods
        .iter()
        .map(|m| {
            let res = catch_unwind(AssertUnwindSafe(|| run_method(ds, m, &net, cfg)));
            match res {
                Ok(o) => o,
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panic".into());
                    failed_outcome(m.name(), format!("panic: {msg}"))
                }
            }
        })
        .collect();
    Ok(RunOutput {
        dataset: ds.meta.get("scenario").cloned().unwrap_or_else(|| "dataset".into()),
        seed: cfg.seed,
        outcomes,
    })
}

fn failed_outcome(method: &str, error: String) -> MethodOutcome {
    log::warn!("{method}: trial failed: {error}");
    MethodOutcome {
        method: method.to_string(),
        report: None,
        error: Some(error),
        timing: Vec::new(),
        history: None,
        comms: CommStats::default(),
        connected_pairs: BTreeSet::new(),
        events: Vec::new(),
    }
}

#[derive(Debug, Error)]
pub enum TrialError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Other(String),
}

struct Recorder<'a> {
    ds: &'a Dataset,
    truth: Values,
    labels: BTreeMap<usize, bool>,
    every: u64,
    last: u64,
    series: Vec<StepMetrics>,
    timing: Vec<(u64, f64)>,
    history: Option<SolutionHistory>,
    pending_seconds: f64,
}

impl<'a> Recorder<'a> {
    fn new(ds: &'a Dataset, cfg: &RunConfig) -> Self {
        Recorder {
            ds,
            truth: ds.ground_truth(),
            labels: ds.loop_closures().map(|(i, r)| (i, r.inlier)).collect(),
            every: cfg.history_every,
            last: ds.steps().saturating_sub(1),
            series: Vec::new(),
            timing: Vec::new(),
            history: cfg.record_history.then(SolutionHistory::new),
            pending_seconds: 0.0,
        }
    }

    fn wants(&self, step: u64) -> bool {
        step % self.every == 0 || step == self.last
    }

    fn record(&mut self, step: u64, seconds: f64, estimate: impl FnOnce() -> Values, classes: impl FnOnce() -> BTreeMap<usize, bool>) -> Result<(), TrialError> {
        self.pending_seconds += seconds;
        if !self.wants(step) {
            return Ok(());
        }
        let est = estimate();
        let cls = classes();
        let mut m = step_metrics(step, &est, &self.truth, &cls, &self.labels)?;
        m.update_seconds = self.pending_seconds;
        self.timing.push((step, self.pending_seconds));
        self.pending_seconds = 0.0;
        self.series.push(m);
        if let Some(h) = self.history.as_mut() {
            h.push(HistoryEntry {
                step,
                estimate: est,
                classifications: cls,
            })?;
        }
        Ok(())
    }

    fn finish(self, method: &str, comms: CommStats, pairs: BTreeSet<(RobotId, RobotId)>, events: Vec<CommEvent>) -> Result<MethodOutcome, TrialError> {
        let _ = self.ds;
        Ok(MethodOutcome {
            method: method.to_string(),
            report: Some(MetricReport::from_series(self.series)?),
            error: None,
            timing: self.timing,
            history: self.history,
            comms,
            connected_pairs: pairs,
            events,
        })
    }
}

fn run_method(ds: &Dataset, spec: &MethodSpec, net: &NetworkConfig, cfg: &RunConfig) -> MethodOutcome {
    let res = match spec.kind {
        k if k.is_distributed() => run_distributed(ds, spec, net, cfg),
        MethodKind::MesaPlus => run_mesa_plus(ds, spec, net, cfg),
        _ => run_centralized(ds, spec, cfg),
    };
    res.unwrap_or_else(|e| failed_outcome(spec.name(), e.to_string()))
}

fn positions(ds: &Dataset, step: u64) -> BTreeMap<RobotId, Vector3<f64>> {
    ds.truth
        .iter()
        .filter_map(|(r, t)| t.get(step as usize).or(t.last()).map(|p| (*r, *p.translation())))
        .collect()
}

fn fault(spec: &MethodSpec, step: u64) -> Result<(), TrialError> {
    if spec.fault_step == Some(step) {
        return Err(TrialError::Other(format!("injected fault at step {step}")));
    }
    Ok(())
}

/// Whether a method includes the record in its problem.
fn admits(spec: &MethodSpec, rec: &Record) -> bool {
    if spec.oracle_filter() && !rec.inlier {
        return false;
    }
    if spec.kind == MethodKind::Independent && rec.foreign_keys().next().is_some() {
        return false;
    }
    true
}

/// Builds factors for `records` and initial values for every variable they introduce.
fn factors_with_inits<'r>(
    records: impl Iterator<Item = &'r Record>,
    known: impl Fn(&VariableKey) -> Option<Value>,
) -> Result<(Vec<Factor>, Values), TrialError> {
    let mut factors = Vec::new();
    let mut inits = Values::new();
    for rec in records {
        let f = rec.factor()?;
        let mut ctx = Values::new();
        for k in f.keys() {
            if let Some(v) = inits.get(k).cloned().or_else(|| known(k)) {
                ctx.insert(*k, v);
            }
        }
        for k in f.keys() {
            if ctx.contains(k) {
                continue;
            }
            let seeded = match (&rec.payload, rec.class) {
                (Payload::Pose(p), MeasurementClass::Prior) => Some(Value::Pose(*p)),
                _ => seed_estimate(&f, &ctx, k),
            };
            let v = seeded.ok_or_else(|| TrialError::Other(format!("cannot initialize {k} from record at step {}", rec.step)))?;
            ctx.insert(*k, v.clone());
            inits.insert(*k, v);
        }
        factors.push(f);
    }
    Ok((factors, inits))
}

fn classify(factor: &Factor, values: &Values) -> bool {
    factor.squared_error(values).map(|e| e < chi2_95(factor.dim())).unwrap_or(false)
}

/// Inlier when the fully graduated kernel keeps at least half its influence.
fn classify_influence(factor: &Factor, values: &Values) -> bool {
    match factor.kernel() {
        k if k.is_graduated() => factor
            .squared_error(values)
            .map(|e| k.with_mu(1.0).influence(e) >= INFLUENCE_INLIER)
            .unwrap_or(false),
        _ => classify(factor, values),
    }
}

/// The robots of one distributed method, fed from a dataset.
pub struct Fleet<'a> {
    spec: &'a MethodSpec,
    ds: &'a Dataset,
    ids: Vec<RobotId>,
    pos: BTreeMap<RobotId, usize>,
    agents: Vec<AgentState>,
    /// Record index to (agent position, factor index); `None` for records the method dropped.
    placement: BTreeMap<usize, Option<(usize, usize)>>,
}

impl<'a> Fleet<'a> {
    pub fn new(ds: &'a Dataset, spec: &'a MethodSpec) -> Result<Self, TrialError> {
        let ids: Vec<RobotId> = ds.robots().collect();
        let pos = ids.iter().enumerate().map(|(n, r)| (*r, n)).collect();
        let agents = ids
            .iter()
            .map(|r| AgentState::new(*r, spec.agent.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Fleet {
            spec,
            ds,
            ids,
            pos,
            agents,
            placement: BTreeMap::new(),
        })
    }

    pub fn agent(&self, robot: RobotId) -> &AgentState {
        &self.agents[self.pos[&robot]]
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    fn feed_agent(agent: &mut AgentState, ds: &Dataset, spec: &MethodSpec, idxs: &[usize]) -> Result<Vec<(usize, Option<usize>)>, TrialError> {
        let admitted: Vec<usize> = idxs.iter().copied().filter(|i| admits(spec, &ds.records[*i])).collect();
        let mut placed: Vec<(usize, Option<usize>)> = idxs.iter().filter(|i| !admitted.contains(i)).map(|i| (*i, None)).collect();
        if admitted.is_empty() {
            return Ok(placed);
        }
        let (factors, inits) = {
            let est = agent.estimate();
            factors_with_inits(admitted.iter().map(|i| &ds.records[*i]), |k| est.get(k).cloned())?
        };
        let base = agent.graph().len();
        agent.update(factors, inits)?;
        placed.extend(admitted.iter().enumerate().map(|(n, i)| (*i, Some(base + n))));
        Ok(placed)
    }

    /// Gives every robot its measurements for `step`.
    pub fn feed(&mut self, step: u64, threaded: bool) -> Result<(), TrialError> {
        let (ds, spec) = (self.ds, self.spec);
        let streams: Vec<Vec<usize>> = self.ids.iter().map(|r| ds.stream(*r, step)).collect();
        let placed: Vec<Vec<(usize, Option<usize>)>> = if threaded {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .agents
                    .iter_mut()
                    .zip(&streams)
                    .map(|(agent, idxs)| s.spawn(move || Fleet::feed_agent(agent, ds, spec, idxs)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("robot thread panicked")).collect::<Result<Vec<_>, _>>()
            })?
        } else {
            self.agents
                .iter_mut()
                .zip(&streams)
                .map(|(agent, idxs)| Fleet::feed_agent(agent, ds, spec, idxs))
                .collect::<Result<Vec<_>, _>>()?
        };
        for (a, list) in placed.into_iter().enumerate() {
            for (i, f) in list {
                self.placement.insert(i, f.map(|f| (a, f)));
            }
        }
        Ok(())
    }

    /// Snapshots for an exchange between `i` and `j`, in that order.
    pub fn begin(&self, i: RobotId, j: RobotId) -> (CommSnapshot, CommSnapshot) {
        (self.agent(i).begin_communication(j), self.agent(j).begin_communication(i))
    }

    /// Incorporates results; each robot processes its own results in order.
    pub fn deliver(&mut self, results: Vec<CommResult>, threaded: bool) -> Result<(), TrialError> {
        let mut inbox: Vec<Vec<CommResult>> = vec![Vec::new(); self.ids.len()];
        for r in results {
            let at = *self.pos.get(&r.robot).ok_or_else(|| TrialError::Other(format!("unknown robot {}", r.robot)))?;
            inbox[at].push(r);
        }
        if threaded {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .agents
                    .iter_mut()
                    .zip(&inbox)
                    .map(|(agent, msgs)| s.spawn(move || msgs.iter().try_for_each(|m| agent.incorporate(m))))
                    .collect();
                handles.into_iter().try_for_each(|h| h.join().expect("handler thread panicked"))
            })?;
        } else {
            for (agent, msgs) in self.agents.iter_mut().zip(&inbox) {
                for m in msgs {
                    agent.incorporate(m)?;
                }
            }
        }
        Ok(())
    }

    /// Each robot's own poses plus the first estimate of every environment variable.
    pub fn joint_estimate(&self) -> Values {
        let mut out = Values::new();
        for a in &self.agents {
            for (k, v) in a.estimate().iter() {
                if k.robot() == Some(a.id()) || (k.is_environment() && !out.contains(k)) {
                    out.insert(*k, v.clone());
                }
            }
        }
        out
    }

    /// Classification of every loop closure seen so far, by record index.
    pub fn classifications(&self) -> BTreeMap<usize, bool> {
        self.placement
            .iter()
            .filter(|(i, _)| self.ds.records[**i].class.is_loop_closure())
            .filter_map(|(i, p)| match p {
                Some((a, f)) => {
                    let agent = &self.agents[*a];
                    let factor = agent.graph().factor(*f);
                    Some((*i, classify_influence(factor, agent.estimate())))
                }
                None if self.spec.oracle_filter() => Some((*i, false)),
                None => None,
            })
            .collect()
    }
}

fn run_distributed(ds: &Dataset, spec: &MethodSpec, net: &NetworkConfig, cfg: &RunConfig) -> Result<MethodOutcome, TrialError> {
    let mut fleet = Fleet::new(ds, spec)?;
    let communicate = spec.kind != MethodKind::Independent;
    let mut netsim = NetSim::new(net.clone()).map_err(|e| TrialError::Other(e.to_string()))?;
    let mut snapshots: BTreeMap<u64, (CommSnapshot, CommSnapshot)> = BTreeMap::new();
    let mut comms = CommStats::default();
    let mut pairs = BTreeSet::new();
    let mut rec = Recorder::new(ds, cfg);

    for step in 0..ds.steps() {
        fault(spec, step)?;
        let t0 = Instant::now();
        fleet.feed(step, cfg.threaded)?;
        let started = netsim.step(step, &positions(ds, step));
        let done = netsim.completed(step);
        if communicate {
            for ev in &started {
                snapshots.insert(ev.id, fleet.begin(ev.i, ev.j));
            }
            let mut results = Vec::new();
            for ev in &done {
                let (si, sj) = snapshots.remove(&ev.id).expect("snapshot taken at initiation");
                let (ri, rj) = exchange(&si, &sj)?;
                netsim.set_payload(ev.id, ri.payload_bytes());
                match ev.outcome {
                    Outcome::Success => {
                        comms.success += 1;
                        pairs.insert((ev.i, ev.j));
                    }
                    Outcome::OneSided(_) => comms.one_sided += 1,
                    Outcome::Fail => comms.failed += 1,
                }
                for (r, res) in [(ev.i, ri), (ev.j, rj)] {
                    if ev.outcome.delivers_to(r) {
                        results.push(res);
                    }
                }
            }
            fleet.deliver(results, cfg.threaded)?;
        }
        let secs = t0.elapsed().as_secs_f64();
        rec.record(step, secs, || fleet.joint_estimate(), || fleet.classifications())?;
    }
    let events = netsim.log().to_vec();
    rec.finish(spec.name(), comms, pairs, events)
}

fn run_centralized(ds: &Dataset, spec: &MethodSpec, cfg: &RunConfig) -> Result<MethodOutcome, TrialError> {
    let gnc = spec.kind == MethodKind::CentralizedGnc;
    let mut graph = FactorGraph::new();
    let mut values = Values::new();
    let mut placement: BTreeMap<usize, Option<usize>> = BTreeMap::new();
    let mut rec = Recorder::new(ds, cfg);
    let ids: Vec<RobotId> = ds.robots().collect();
    for step in 0..ds.steps() {
        fault(spec, step)?;
        let t0 = Instant::now();
        let mut solve = false;
        for r in &ids {
            let idxs = ds.stream(*r, step);
            let admitted: Vec<usize> = idxs.iter().copied().filter(|i| admits(spec, &ds.records[*i])).collect();
            for i in idxs.iter().filter(|i| !admitted.contains(i)) {
                placement.insert(*i, None);
            }
            let (factors, inits) = factors_with_inits(admitted.iter().map(|i| &ds.records[*i]), |k| values.get(k).cloned())?;
            values.extend(inits);
            for (i, mut f) in admitted.into_iter().zip(factors) {
                let class = ds.records[i].class;
                solve |= class != MeasurementClass::Odometry && class != MeasurementClass::Prior;
                if gnc && f.is_outlier_candidate() {
                    f.set_kernel(RobustKernel::graduated(f.dim()));
                }
                placement.insert(i, Some(graph.add(f)));
            }
        }
        if solve || step == 0 {
            let report = if gnc {
                optimize_gnc(&graph, &values, &spec.solver).map(|(r, _)| r)
            } else {
                optimize_batch(&graph, &values, &spec.solver)
            }
            .map_err(AgentError::from)?;
            values = report.values;
        }
        let secs = t0.elapsed().as_secs_f64();
        let classes = || {
            placement
                .iter()
                .filter(|(i, _)| ds.records[**i].class.is_loop_closure())
                .map(|(i, p)| (*i, p.is_some_and(|f| classify(graph.factor(f), &values))))
                .collect()
        };
        rec.record(step, secs, || values.clone(), classes)?;
    }
    rec.finish(spec.name(), CommStats::default(), BTreeSet::new(), Vec::new())
}

/// Record index to (robot, factor index) in that robot's local graph.
pub type Placement = BTreeMap<usize, Option<(RobotId, usize)>>;

/// Every robot's complete local problem, initialized by dead reckoning.
pub fn local_problems(ds: &Dataset, spec: &MethodSpec) -> Result<(Vec<LocalProblem>, Placement), TrialError> {
    let mut placement = Placement::new();
    let mut problems = Vec::new();
    for r in ds.robots() {
        let mut graph = FactorGraph::new();
        let mut init = Values::new();
        for step in 0..ds.steps() {
            let idxs = ds.stream(r, step);
            let admitted: Vec<usize> = idxs.iter().copied().filter(|i| admits(spec, &ds.records[*i])).collect();
            for i in idxs.iter().filter(|i| !admitted.contains(i)) {
                placement.insert(*i, None);
            }
            let (factors, inits) = factors_with_inits(admitted.iter().map(|i| &ds.records[*i]), |k| init.get(k).cloned())?;
            init.extend(inits);
            for (i, f) in admitted.into_iter().zip(factors) {
                placement.insert(i, Some((r, graph.add(f))));
            }
        }
        problems.push(LocalProblem { robot: r, graph, init });
    }
    Ok((problems, placement))
}

/// The joint problem over all robots' admitted records, initialized by dead reckoning.
pub fn central_problem(ds: &Dataset, spec: &MethodSpec) -> Result<(FactorGraph, Values), TrialError> {
    let mut graph = FactorGraph::new();
    let mut values = Values::new();
    for step in 0..ds.steps() {
        for r in ds.robots() {
            let admitted: Vec<usize> = ds.stream(r, step).into_iter().filter(|i| admits(spec, &ds.records[*i])).collect();
            let (factors, inits) = factors_with_inits(admitted.iter().map(|i| &ds.records[*i]), |k| values.get(k).cloned())?;
            values.extend(inits);
            for mut f in factors {
                if spec.kind == MethodKind::CentralizedGnc && f.is_outlier_candidate() {
                    f.set_kernel(RobustKernel::graduated(f.dim()));
                }
                graph.add(f);
            }
        }
    }
    Ok((graph, values))
}

/// Batch consensus over the whole dataset. The pair schedule is the
/// sequence of two-sided exchanges the network delivers over the run.
fn run_mesa_plus(ds: &Dataset, spec: &MethodSpec, net: &NetworkConfig, cfg: &RunConfig) -> Result<MethodOutcome, TrialError> {
    let t0 = Instant::now();
    let ids: Vec<RobotId> = ds.robots().collect();
    let mut netsim = NetSim::new(net.clone()).map_err(|e| TrialError::Other(e.to_string()))?;
    let mut schedule = Vec::new();
    let mut comms = CommStats::default();
    let mut pairs = BTreeSet::new();
    for step in 0..ds.steps() {
        fault(spec, step)?;
        netsim.step(step, &positions(ds, step));
        for ev in netsim.completed(step) {
            match ev.outcome {
                Outcome::Success => {
                    comms.success += 1;
                    pairs.insert((ev.i, ev.j));
                    schedule.push((ev.i, ev.j));
                }
                Outcome::OneSided(_) => comms.one_sided += 1,
                Outcome::Fail => comms.failed += 1,
            }
        }
    }
    if schedule.is_empty() {
        schedule.push((ids[0], ids[0]));
    }
    let (problems, placement) = local_problems(ds, spec)?;
    let graphs: BTreeMap<RobotId, FactorGraph> = problems.iter().map(|p| (p.robot, p.graph.clone())).collect();
    let result = mesa_plus(problems, &schedule, &spec.mesa).map_err(|e| TrialError::Other(e.to_string()))?;
    let mut joint = Values::new();
    for (r, est) in &result.estimates {
        for (k, v) in est.iter() {
            if k.robot() == Some(*r) || (k.is_environment() && !joint.contains(k)) {
                joint.insert(*k, v.clone());
            }
        }
    }
    let classes: BTreeMap<usize, bool> = placement
        .iter()
        .filter(|(i, _)| ds.records[**i].class.is_loop_closure())
        .map(|(i, p)| (*i, p.is_some_and(|(r, f)| classify(graphs[&r].factor(f), &result.estimates[&r]))))
        .collect();
    let mut rec = Recorder::new(ds, cfg);
    let last = ds.steps().saturating_sub(1);
    rec.every = u64::MAX;
    rec.record(last, t0.elapsed().as_secs_f64(), || joint, || classes)?;
    rec.finish(spec.name(), comms, pairs, netsim.log().to_vec())
}

pub const SUMMARY_HEADER: &str =
    "method,dataset,seed,status,iate,final_ate,final_ate_rotation,if1,final_f1,precision,recall,comm_success,comm_one_sided,comm_fail,error";
pub const SERIES_HEADER: &str = "method,dataset,seed,step,ate,ate_rotation,f1";
pub const TIMING_HEADER: &str = "method,dataset,seed,step,update_seconds,cumulative_seconds";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_rows(out: &RunOutput) -> Vec<String> {
    out.outcomes
        .iter()
        .map(|o| {
            let c = o.comms;
            let (status, nums) = match &o.report {
                Some(r) => (
                    "ok",
                    format!(
                        "{},{},{},{},{},{},{}",
                        r.iate, r.final_ate, r.final_ate_rotation, r.if1, r.final_f1, r.precision, r.recall
                    ),
                ),
                None => ("failed", ",,,,,,".to_string()),
            };
            format!(
                "{},{},{},{status},{nums},{},{},{},{}",
                o.method,
                csv_field(&out.dataset),
                out.seed,
                c.success,
                c.one_sided,
                c.failed,
                csv_field(o.error.as_deref().unwrap_or(""))
            )
        })
        .collect()
}

pub fn summary_csv(out: &RunOutput) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for row in summary_rows(out) {
        s.push_str(&row);
        s.push('\n');
    }
    s
}

pub fn series_csv(out: &RunOutput) -> String {
    let mut s = format!("{SERIES_HEADER}\n");
    for o in &out.outcomes {
        for m in o.report.iter().flat_map(|r| &r.series) {
            let f1 = m.f1.map(|f| f.f1.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{},{f1}", o.method, csv_field(&out.dataset), out.seed, m.step, m.ate, m.ate_rotation).unwrap();
        }
    }
    s
}

pub fn timing_csv(out: &RunOutput) -> String {
    let mut s = format!("{TIMING_HEADER}\n");
    for o in &out.outcomes {
        let mut total = 0.0;
        for (step, secs) in &o.timing {
            total += secs;
            writeln!(s, "{},{},{},{step},{secs},{total}", o.method, csv_field(&out.dataset), out.seed).unwrap();
        }
    }
    s
}

/// Writes `summary.csv`, `series.csv`, `timing.csv`, `events.tsv` and any recorded histories.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(out))?;
    std::fs::write(dir.join("series.csv"), series_csv(out))?;
    std::fs::write(dir.join("timing.csv"), timing_csv(out))?;
    if let Some(o) = out.outcomes.iter().find(|o| !o.events.is_empty()) {
        let mut buf = Vec::new();
        write_events(&o.events, &mut buf)?;
        std::fs::write(dir.join("events.tsv"), buf)?;
    }
    for o in &out.outcomes {
        if let Some(h) = &o.history {
            std::fs::write(dir.join(format!("history_{}.txt", o.method)), h.to_text())?;
        }
    }
    Ok(())
}

/// Output directory, with the environment override taking precedence.
pub fn resolve_output_dir(requested: Option<PathBuf>) -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).or(requested)
}

/// Communication quality cell: delay (steps), initiation rate, range (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommQuality {
    pub delay: u64,
    pub rate: f64,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Yaw noise levels in degrees.
    SigmaRz(Vec<f64>),
    Comm(Vec<CommQuality>),
    OutlierFraction(Vec<f64>),
}

impl SweepAxis {
    /// Parses `sigma_rz=0.5,1,2`, `outliers=0.1,0.2` or `comm=10:1:30,0:10:50`.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("axis `{s}` is not name=values")))?;
        let nums = |l: &str| -> Result<Vec<f64>, HarnessError> {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| HarnessError::Config(format!("invalid axis value `{v}`"))))
                .collect()
        };
        let axis = match name {
            "sigma_rz" => SweepAxis::SigmaRz(nums(list)?),
            "outliers" => SweepAxis::OutlierFraction(nums(list)?),
            "comm" => SweepAxis::Comm(
                list.split(',')
                    .map(|cell| {
                        let parts: Vec<&str> = cell.trim().split(':').collect();
                        let bad = || HarnessError::Config(format!("comm cell `{cell}` must be delay:rate:range"));
                        if parts.len() != 3 {
                            return Err(bad());
                        }
                        Ok(CommQuality {
                            delay: parts[0].parse().map_err(|_| bad())?,
                            rate: parts[1].parse().map_err(|_| bad())?,
                            range: parts[2].parse().map_err(|_| bad())?,
                        })
                    })
                    .collect::<Result<_, _>>()?,
            ),
            other => return Err(HarnessError::Config(format!("unknown sweep axis `{other}`"))),
        };
        if axis.len() == 0 {
            return Err(HarnessError::Config("empty sweep axis".into()));
        }
        Ok(axis)
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::SigmaRz(v) | SweepAxis::OutlierFraction(v) => v.len(),
            SweepAxis::Comm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cell(&self, i: usize, scenario: &mut ScenarioConfig, net: &mut NetworkConfig) -> String {
        match self {
            SweepAxis::SigmaRz(v) => {
                scenario.sigma_rz = v[i].to_radians();
                format!("sigma_rz={}", v[i])
            }
            SweepAxis::OutlierFraction(v) => {
                scenario.outlier_fraction = v[i];
                format!("outliers={}", v[i])
            }
            SweepAxis::Comm(v) => {
                let c = v[i];
                net.delay = c.delay;
                net.rate = c.rate;
                net.max_range = c.range;
                format!("comm={}:{}:{}", c.delay, c.rate, c.range)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scenario: ScenarioConfig,
    pub network: NetworkConfig,
    pub methods: Vec<MethodSpec>,
    pub axis: SweepAxis,
    pub trials: usize,
    pub seed: u64,
    pub threaded: bool,
}

pub const SWEEP_HEADER: &str = "cell,trial,method,dataset,seed,status,iate,final_ate,final_ate_rotation,if1,final_f1,precision,recall,comm_success,comm_one_sided,comm_fail,error";

/// One CSV row per (cell, trial, method).
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<String>, HarnessError> {
    if cfg.trials == 0 {
        return Err(HarnessError::Config("trials must be positive".into()));
    }
    let mut rows = Vec::new();
    for cell in 0..cfg.axis.len() {
        for trial in 0..cfg.trials {
            let mut scenario = cfg.scenario.clone();
            let mut network = cfg.network.clone();
            let label = cfg.axis.cell(cell, &mut scenario, &mut network);
            scenario.seed = cfg.scenario.seed + trial as u64;
            let run_cfg = RunConfig {
                dataset: DatasetSource::Scenario(scenario.clone()),
                network,
                methods: cfg.methods.clone(),
                output_dir: None,
                record_history: false,
                history_every: 1,
                seed: cfg.seed + trial as u64,
                threaded: cfg.threaded,
            };
            let ds = generate(&scenario)?;
            let out = run_on(&ds, &run_cfg)?;
            for row in summary_rows(&out) {
                rows.push(format!("{},{trial},{row}", csv_field(&label)));
            }
        }
    }
    Ok(rows)
}
