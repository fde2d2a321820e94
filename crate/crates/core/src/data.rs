//! Synthetic multi-robot datasets and their text file format.
//!
//! File records, one per line (`#` starts a comment):
//!
//! ```text
//! META <key> <value>
//! ROBOT <id>
//! GT_POSE <robot> <idx> <pose...>
//! GT_LM <id> <coords...>
//! PRIOR <robot> <idx> <pose...> <sigmas...>
//! ODOM <robot> <idx_from> <idx_to> <pose...> <sigmas...>
//! LOOP <class> <payload> <robot> <step> <keyA> <keyB> <values...> <sigmas...> <inlier 0|1>
//! ```
//!
//! Poses are `x y θ` in 2D and `x y z qx qy qz qw` in 3D. `META dim` must
//! precede any record that carries a pose. Loop classes are `intra`,
//! `direct`, `indirect` and `landmark`; payloads are `pose`, `range`,
//! `bearing_range` and `point`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DVector, Quaternion, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::factors::{bearing_range_of, Factor, FactorError, NoiseModel, RobotId, Value, Values, VariableKey};
use crate::manifold::{Pose, Rotation};

pub const FORMAT_VERSION: u32 = 1;
pub const OUTLIER_FRACTION_MIN: f64 = 0.10;
pub const OUTLIER_FRACTION_MAX: f64 = 0.25;
pub const LOOP_PROBABILITY: f64 = 0.2;
/// Standard deviation of the anchor prior on each robot's first pose.
pub const ANCHOR_SIGMA: f64 = 1e-4;
/// Floor applied to noise-model sigmas so zero-noise scenarios stay solvable.
pub const MIN_SIGMA: f64 = 1e-6;
/// Closest a range-type observation may be taken, meters.
pub const MIN_SEPARATION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown record tag `{tag}`")]
    UnknownTag { line: usize, tag: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mobility {
    /// SE(2) states.
    Planar,
    /// Upright SE(3) states at constant height.
    Planar3d,
    /// SE(3) states that also climb and descend.
    Free3d,
}

impl Mobility {
    pub fn dim(self) -> usize {
        match self {
            Mobility::Planar => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectKind {
    RelativePose,
    Range,
    BearingRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub robots: usize,
    pub length: usize,
    pub mobility: Mobility,
    pub intra_loops: bool,
    pub direct_inter: Option<DirectKind>,
    pub indirect_inter: bool,
    pub landmark_obs: bool,
    pub num_landmarks: usize,
    /// Roll/pitch noise, radians.
    pub sigma_r: f64,
    /// Yaw noise, radians.
    pub sigma_rz: f64,
    /// Translation and range noise, meters.
    pub sigma_t: f64,
    /// Zero, or a target in `[OUTLIER_FRACTION_MIN, OUTLIER_FRACTION_MAX]`.
    pub outlier_fraction: f64,
    pub loop_probability: f64,
    pub observation_range: f64,
    /// Half-width of the square the robots roam in, meters.
    pub bounds: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "cpgo-planar".into(),
            robots: 6,
            length: 1000,
            mobility: Mobility::Planar,
            intra_loops: true,
            direct_inter: Some(DirectKind::RelativePose),
            indirect_inter: true,
            landmark_obs: false,
            num_landmarks: 0,
            sigma_r: 0.25f64.to_radians(),
            sigma_rz: 0.25f64.to_radians(),
            sigma_t: 0.05,
            outlier_fraction: 0.15,
            loop_probability: LOOP_PROBABILITY,
            observation_range: 30.0,
            bounds: 20.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Named scenarios; `None` for unknown names.
    pub fn preset(name: &str) -> Option<Self> {
        let base = ScenarioConfig {
            name: name.into(),
            ..ScenarioConfig::default()
        };
        let cfg = match name {
            "cpgo-planar" => base,
            "cpgo-planar3d" => ScenarioConfig {
                mobility: Mobility::Planar3d,
                ..base
            },
            "cpgo-3d" => ScenarioConfig {
                mobility: Mobility::Free3d,
                ..base
            },
            "range" => ScenarioConfig {
                direct_inter: Some(DirectKind::Range),
                indirect_inter: false,
                ..base
            },
            "bearing-range" => ScenarioConfig {
                direct_inter: Some(DirectKind::BearingRange),
                indirect_inter: false,
                ..base
            },
            "landmark" => ScenarioConfig {
                direct_inter: None,
                indirect_inter: false,
                landmark_obs: true,
                num_landmarks: 20,
                ..base
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["cpgo-planar", "cpgo-planar3d", "cpgo-3d", "range", "bearing-range", "landmark"]
    }

    /// Three robots, 100 poses each.
    pub fn desk(self) -> Self {
        ScenarioConfig {
            robots: 3,
            length: 100,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidScenario(m));
        if self.robots == 0 {
            return bad("at least one robot is required".into());
        }
        if self.length < 2 {
            return bad("trajectories need at least two poses".into());
        }
        for (n, v) in [("sigma_r", self.sigma_r), ("sigma_rz", self.sigma_rz), ("sigma_t", self.sigma_t)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{n} must be nonnegative"));
            }
        }
        let f = self.outlier_fraction;
        if f != 0.0 && !(OUTLIER_FRACTION_MIN..=OUTLIER_FRACTION_MAX).contains(&f) {
            return bad(format!(
                "outlier fraction {f} outside [{OUTLIER_FRACTION_MIN}, {OUTLIER_FRACTION_MAX}] (or 0)"
            ));
        }
        if !(0.0..=1.0).contains(&self.loop_probability) {
            return bad("loop probability must lie in [0, 1]".into());
        }
        if !(self.observation_range > 0.0 && self.bounds > 0.0) {
            return bad("observation range and bounds must be positive".into());
        }
        if self.landmark_obs && self.num_landmarks == 0 {
            return bad("landmark observations enabled without landmarks".into());
        }
        if self.direct_inter.is_some() && self.robots < 2 || self.indirect_inter && self.robots < 2 {
            return bad("inter-robot measurements need two or more robots".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MeasurementClass {
    Prior,
    Odometry,
    IntraLoop,
    DirectInter,
    IndirectInter,
    Landmark,
}

impl MeasurementClass {
    pub fn is_loop_closure(self) -> bool {
        matches!(self, MeasurementClass::IntraLoop | MeasurementClass::DirectInter | MeasurementClass::IndirectInter)
    }

    fn tag(self) -> &'static str {
        match self {
            MeasurementClass::Prior => "prior",
            MeasurementClass::Odometry => "odom",
            MeasurementClass::IntraLoop => "intra",
            MeasurementClass::DirectInter => "direct",
            MeasurementClass::IndirectInter => "indirect",
            MeasurementClass::Landmark => "landmark",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        Some(match s {
            "intra" => MeasurementClass::IntraLoop,
            "direct" => MeasurementClass::DirectInter,
            "indirect" => MeasurementClass::IndirectInter,
            "landmark" => MeasurementClass::Landmark,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Pose(Pose),
    Range(f64),
    BearingRange { bearing: Vec<f64>, range: f64 },
    Point(Vec<f64>),
}

impl Payload {
    fn tag(&self) -> &'static str {
        match self {
            Payload::Pose(_) => "pose",
            Payload::Range(_) => "range",
            Payload::BearingRange { .. } => "bearing_range",
            Payload::Point(_) => "point",
        }
    }
}

/// One measurement in a robot's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Robot whose stream carries the measurement.
    pub robot: RobotId,
    /// Step at which the measurement becomes available.
    pub step: u64,
    pub class: MeasurementClass,
    pub keys: Vec<VariableKey>,
    pub payload: Payload,
    pub sigmas: Vec<f64>,
    pub inlier: bool,
}

impl Record {
    /// The factor this measurement contributes; loop closures are outlier candidates.
    pub fn factor(&self) -> Result<Factor, DataError> {
        let noise = NoiseModel::diagonal(&self.sigmas)?;
        let f = match (&self.payload, self.keys.as_slice()) {
            (Payload::Pose(p), [k]) => Factor::prior_pose(*k, *p, noise)?,
            (Payload::Pose(p), [a, b]) => Factor::between(*a, *b, *p, noise)?,
            (Payload::Range(d), [a, b]) => Factor::range(*a, *b, *d, noise)?,
            (Payload::BearingRange { bearing, range }, [a, b]) => Factor::bearing_range(*a, *b, bearing, *range, noise)?,
            (Payload::Point(p), [a, b]) => Factor::landmark_obs(*a, *b, p, noise)?,
            _ => {
                return Err(DataError::Factor(FactorError::InvalidMeasurement(format!(
                    "{} payload with {} keys",
                    self.payload.tag(),
                    self.keys.len()
                ))))
            }
        };
        Ok(if self.class.is_loop_closure() { f.as_outlier_candidate() } else { f })
    }

    /// Keys owned by robots other than the stream owner.
    pub fn foreign_keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.keys.iter().filter(move |k| k.robot().is_some_and(|r| r != self.robot))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: BTreeMap<String, String>,
    pub dim: usize,
    /// Ground-truth trajectory per robot.
    pub truth: BTreeMap<RobotId, Vec<Pose>>,
    pub landmarks: BTreeMap<u64, Vec<f64>>,
    /// Measurements ordered by step, then robot.
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn robots(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.truth.keys().copied()
    }

    /// Number of steps: the longest trajectory.
    pub fn steps(&self) -> u64 {
        self.truth.values().map(|t| t.len() as u64).max().unwrap_or(0)
    }

    /// Indices into `records` of the measurements `robot` receives at `step`.
    pub fn stream(&self, robot: RobotId, step: u64) -> Vec<usize> {
        let start = self.records.partition_point(|r| r.step < step);
        self.records[start..]
            .iter()
            .enumerate()
            .take_while(|(_, r)| r.step == step)
            .filter(|(_, r)| r.robot == robot)
            .map(|(i, _)| start + i)
            .collect()
    }

    pub fn ground_truth(&self) -> Values {
        let mut v = Values::new();
        for (r, traj) in &self.truth {
            for (i, p) in traj.iter().enumerate() {
                v.insert_pose(VariableKey::pose(*r, i as u64), *p);
            }
        }
        for (id, p) in &self.landmarks {
            v.insert(VariableKey::landmark(*id), Value::point(p));
        }
        v
    }

    pub fn loop_closures(&self) -> impl Iterator<Item = (usize, &Record)> {
        self.records.iter().enumerate().filter(|(_, r)| r.class.is_loop_closure())
    }

    /// Outliers over loop closures; `None` without loop closures.
    pub fn outlier_fraction(&self) -> Option<f64> {
        let (n, out) = self.loop_closures().fold((0, 0), |(n, o), (_, r)| (n + 1, o + usize::from(!r.inlier)));
        (n > 0).then(|| out as f64 / n as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut meta = self.meta.clone();
        meta.insert("format_version".into(), FORMAT_VERSION.to_string());
        meta.insert("dim".into(), self.dim.to_string());
        writeln!(out, "META format_version {}", FORMAT_VERSION).unwrap();
        writeln!(out, "META dim {}", self.dim).unwrap();
        for (k, v) in meta.iter().filter(|(k, _)| *k != "format_version" && *k != "dim") {
            writeln!(out, "META {k} {v}").unwrap();
        }
        for (r, traj) in &self.truth {
            writeln!(out, "ROBOT {r}").unwrap();
            for (i, p) in traj.iter().enumerate() {
                writeln!(out, "GT_POSE {r} {i} {}", fmt_pose(p)).unwrap();
            }
        }
        for (id, p) in &self.landmarks {
            writeln!(out, "GT_LM {id} {}", fmt_nums(p)).unwrap();
        }
        for rec in &self.records {
            let sig = fmt_nums(&rec.sigmas);
            match (rec.class, &rec.payload) {
                (MeasurementClass::Prior, Payload::Pose(p)) => {
                    let k = rec.keys[0];
                    writeln!(out, "PRIOR {} {} {} {sig}", rec.robot, k.index, fmt_pose(p)).unwrap();
                }
                (MeasurementClass::Odometry, Payload::Pose(p)) => {
                    let (a, b) = (rec.keys[0], rec.keys[1]);
                    writeln!(out, "ODOM {} {} {} {} {sig}", rec.robot, a.index, b.index, fmt_pose(p)).unwrap();
                }
                (class, payload) => {
                    let values = match payload {
                        Payload::Pose(p) => fmt_pose(p),
                        Payload::Range(d) => fmt_num(*d),
                        Payload::BearingRange { bearing, range } => {
                            let mut v = bearing.clone();
                            v.push(*range);
                            fmt_nums(&v)
                        }
                        Payload::Point(p) => fmt_nums(p),
                    };
                    writeln!(
                        out,
                        "LOOP {} {} {} {} {} {} {values} {sig} {}",
                        class.tag(),
                        payload.tag(),
                        rec.robot,
                        rec.step,
                        rec.keys[0],
                        rec.keys[1],
                        u8::from(rec.inlier)
                    )
                    .unwrap();
                }
            }
        }
        out
    }
}

pub(crate) fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn fmt_nums(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(" ")
}

pub(crate) fn fmt_pose(p: &Pose) -> String {
    let t = p.translation();
    match p.rotation() {
        Rotation::Planar(a) => fmt_nums(&[t.x, t.y, *a]),
        Rotation::Spatial(q) => fmt_nums(&[t.x, t.y, t.z, q.i, q.j, q.k, q.w]),
    }
}

/// `x y θ` or `x y z qx qy qz qw`, stored without renormalization.
pub(crate) fn pose_from_fields(v: &[f64]) -> Option<Pose> {
    match v.len() {
        3 => Some(Pose::from_parts(Rotation::Planar(v[2]), Vector3::new(v[0], v[1], 0.0))),
        7 => {
            let q = UnitQuaternion::new_unchecked(Quaternion::new(v[6], v[3], v[4], v[5]));
            Some(Pose::from_parts(Rotation::Spatial(q), Vector3::new(v[0], v[1], v[2])))
        }
        _ => None,
    }
}

struct Line<'a> {
    no: usize,
    fields: std::str::SplitWhitespace<'a>,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Parse {
            line: self.no,
            msg: msg.into(),
        }
    }

    fn word(&mut self, what: &str) -> Result<&'a str, DataError> {
        self.fields.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn parse<T: FromStr>(&mut self, what: &str) -> Result<T, DataError> {
        let w = self.word(what)?;
        w.parse().map_err(|_| self.err(format!("invalid {what} `{w}`")))
    }

    fn nums(&mut self, n: usize, what: &str) -> Result<Vec<f64>, DataError> {
        (0..n).map(|_| self.parse::<f64>(what)).collect()
    }

    fn pose(&mut self, dim: Option<usize>) -> Result<Pose, DataError> {
        match dim {
            Some(d) => {
                let v = self.nums(if d == 2 { 3 } else { 7 }, "pose value")?;
                pose_from_fields(&v).ok_or_else(|| self.err("malformed pose"))
            }
            None => Err(self.err("pose record before `META dim`")),
        }
    }

    fn key(&mut self) -> Result<VariableKey, DataError> {
        let w = self.word("key")?;
        w.parse().map_err(|e| self.err(format!("{e}")))
    }

    fn finish(mut self) -> Result<(), DataError> {
        match self.fields.next() {
            Some(extra) => Err(self.err(format!("unexpected trailing field `{extra}`"))),
            None => Ok(()),
        }
    }
}

fn tangent_dim(dim: usize) -> usize {
    if dim == 2 { 3 } else { 6 }
}

impl FromStr for Dataset {
    type Err = DataError;

    fn from_str(text: &str) -> Result<Self, DataError> {
        let mut ds = Dataset {
            meta: BTreeMap::new(),
            dim: 0,
            truth: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            records: Vec::new(),
        };
        let mut dim: Option<usize> = None;
        let mut version_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("");
            let mut line = Line {
                no: i + 1,
                fields: content.split_whitespace(),
            };
            let Some(tag) = line.fields.next() else { continue };
            match tag {
                "META" => {
                    let key = line.word("meta key")?.to_string();
                    let value = line.fields.clone().collect::<Vec<_>>().join(" ");
                    if key == "format_version" {
                        if value != FORMAT_VERSION.to_string() {
                            return Err(DataError::Version { found: value });
                        }
                        version_seen = true;
                    }
                    if key == "dim" {
                        match value.as_str() {
                            "2" => dim = Some(2),
                            "3" => dim = Some(3),
                            _ => return Err(line.err(format!("unsupported dim `{value}`"))),
                        }
                        ds.dim = dim.unwrap_or(0);
                    }
                    if key != "format_version" && key != "dim" {
                        ds.meta.insert(key, value);
                    }
                    continue;
                }
                "ROBOT" => {
                    let r: RobotId = line.parse("robot id")?;
                    ds.truth.entry(r).or_default();
                }
                "GT_POSE" => {
                    let r: RobotId = line.parse("robot id")?;
                    let idx: usize = line.parse("pose index")?;
                    let p = line.pose(dim)?;
                    let traj = ds.truth.entry(r).or_default();
                    if idx != traj.len() {
                        return Err(line.err(format!("pose index {idx} out of order (expected {})", traj.len())));
                    }
                    traj.push(p);
                }
                "GT_LM" => {
                    let id: u64 = line.parse("landmark id")?;
                    let d = dim.ok_or_else(|| line.err("landmark before `META dim`"))?;
                    let p = line.nums(d, "landmark coordinate")?;
                    ds.landmarks.insert(id, p);
                }
                "PRIOR" => {
                    let r: RobotId = line.parse("robot id")?;
                    let idx: u64 = line.parse("pose index")?;
                    let p = line.pose(dim)?;
                    let sig = line.nums(tangent_dim(ds.dim), "sigma")?;
                    ds.records.push(Record {
                        robot: r,
                        step: idx,
                        class: MeasurementClass::Prior,
                        keys: vec![VariableKey::pose(r, idx)],
                        payload: Payload::Pose(p),
                        sigmas: sig,
                        inlier: true,
                    });
                }
                "ODOM" => {
                    let r: RobotId = line.parse("robot id")?;
                    let a: u64 = line.parse("from index")?;
                    let b: u64 = line.parse("to index")?;
                    let p = line.pose(dim)?;
                    let sig = line.nums(tangent_dim(ds.dim), "sigma")?;
                    ds.records.push(Record {
                        robot: r,
                        step: a.max(b),
                        class: MeasurementClass::Odometry,
                        keys: vec![VariableKey::pose(r, a), VariableKey::pose(r, b)],
                        payload: Payload::Pose(p),
                        sigmas: sig,
                        inlier: true,
                    });
                }
                "LOOP" => {
                    let ctag = line.word("loop class")?;
                    let class = MeasurementClass::from_tag(ctag).ok_or_else(|| line.err(format!("unknown loop class `{ctag}`")))?;
                    let ptag = line.word("payload")?.to_string();
                    let robot: RobotId = line.parse("robot id")?;
                    let step: u64 = line.parse("step")?;
                    let keys = vec![line.key()?, line.key()?];
                    let d = dim.ok_or_else(|| line.err("loop record before `META dim`"))?;
                    let (payload, n_sig) = match ptag.as_str() {
                        "pose" => (Payload::Pose(line.pose(dim)?), tangent_dim(d)),
                        "range" => (Payload::Range(line.parse("range")?), 1),
                        "bearing_range" => {
                            let v = line.nums(d, "bearing/range")?;
                            (
                                Payload::BearingRange {
                                    bearing: v[..d - 1].to_vec(),
                                    range: v[d - 1],
                                },
                                d,
                            )
                        }
                        "point" => (Payload::Point(line.nums(d, "point coordinate")?), d),
                        other => return Err(line.err(format!("unknown payload `{other}`"))),
                    };
                    let sigmas = line.nums(n_sig, "sigma")?;
                    let inlier = match line.word("inlier flag")? {
                        "0" => false,
                        "1" => true,
                        w => return Err(line.err(format!("invalid inlier flag `{w}`"))),
                    };
                    ds.records.push(Record {
                        robot,
                        step,
                        class,
                        keys,
                        payload,
                        sigmas,
                        inlier,
                    });
                }
                other => {
                    return Err(DataError::UnknownTag {
                        line: line.no,
                        tag: other.to_string(),
                    })
                }
            }
            line.finish()?;
        }
        if !version_seen {
            return Err(DataError::Version { found: "missing".into() });
        }
        if dim.is_none() {
            return Err(DataError::Parse {
                line: 0,
                msg: "missing `META dim`".into(),
            });
        }
        ds.records.sort_by_key(|r| r.step);
        Ok(ds)
    }
}

struct Generator<'c> {
    cfg: &'c ScenarioConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn normal(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sigma).expect("valid sigma").sample(&mut self.rng)
    }

    fn pose_sigmas(&self) -> Vec<f64> {
        let c = self.cfg;
        match c.mobility {
            Mobility::Planar => vec![c.sigma_rz, c.sigma_t, c.sigma_t],
            _ => vec![c.sigma_r, c.sigma_r, c.sigma_rz, c.sigma_t, c.sigma_t, c.sigma_t],
        }
    }

    fn model(sigmas: &[f64]) -> Vec<f64> {
        sigmas.iter().map(|s| s.max(MIN_SIGMA)).collect()
    }

    fn noisy_pose(&mut self, truth: Pose) -> (Payload, Vec<f64>) {
        let sig = self.pose_sigmas();
        let delta: Vec<f64> = sig.iter().map(|s| self.normal(*s)).collect();
        (Payload::Pose(truth.retract(&delta)), Self::model(&sig))
    }

    fn yaw_pose(&self, x: f64, y: f64, z: f64, yaw: f64) -> Pose {
        match self.cfg.mobility {
            Mobility::Planar => Pose::se2(x, y, yaw),
            _ => Pose::se3(UnitQuaternion::from_euler_angles(0.0, 0.0, yaw), Vector3::new(x, y, z)),
        }
    }

    fn random_pose(&mut self) -> Pose {
        let b = self.cfg.bounds;
        let (x, y) = (self.rng.random_range(-b..b), self.rng.random_range(-b..b));
        let yaw = self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let z = if self.cfg.mobility == Mobility::Free3d { self.rng.random_range(0.0..5.0) } else { 0.0 };
        self.yaw_pose(x, y, z, yaw)
    }

    fn trajectory(&mut self) -> Vec<Pose> {
        let b = self.cfg.bounds;
        let start = (self.rng.random_range(-b / 2.0..b / 2.0), self.rng.random_range(-b / 2.0..b / 2.0));
        let heading = self.rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
        let (mut x, mut y, mut z, mut yaw) = (start.0.round(), start.1.round(), 0.0, heading);
        let mut traj = vec![self.yaw_pose(x, y, z, yaw)];
        while traj.len() < self.cfg.length {
            let options = if self.cfg.mobility == Mobility::Free3d { 5 } else { 3 };
            let pick = self.rng.random_range(0..options * 2);
            // Forward is drawn half the time.
            let choice = if pick < options { 0 } else { pick - options + 1 }.min(options - 1);
            match choice {
                0 => {
                    let (nx, ny) = ((x + yaw.cos()).round(), (y + yaw.sin()).round());
                    if nx.abs() <= b && ny.abs() <= b {
                        x = nx;
                        y = ny;
                    } else {
                        yaw += std::f64::consts::FRAC_PI_2;
                    }
                }
                1 => yaw += std::f64::consts::FRAC_PI_2,
                2 => yaw -= std::f64::consts::FRAC_PI_2,
                3 => z = (z + 1.0f64).min(5.0),
                _ => z = (z - 1.0f64).max(0.0),
            }
            yaw = crate::manifold::wrap_angle(yaw);
            traj.push(self.yaw_pose(x, y, z, yaw));
        }
        traj
    }

    fn bearing_payload(&mut self, from: &Pose, target: &Vector3<f64>) -> (Payload, Vec<f64>) {
        let d = from.dim();
        let local = from.inverse_transform_point(target);
        let br = bearing_range_of(&local, d - 1);
        let mut sig = vec![self.cfg.sigma_rz; d - 1];
        sig.push(self.cfg.sigma_t);
        let bearing = (0..d - 1).map(|i| br[i] + self.normal(sig[i])).collect();
        let range = br[d - 1] + self.normal(self.cfg.sigma_t);
        (Payload::BearingRange { bearing, range }, Self::model(&sig))
    }

    fn direct_payload(&mut self, kind: DirectKind, from: &Pose, to: &Pose) -> (Payload, Vec<f64>) {
        match kind {
            DirectKind::RelativePose => self.noisy_pose(from.between(to)),
            DirectKind::Range => {
                let d = (to.translation() - from.translation()).norm() + self.normal(self.cfg.sigma_t);
                (Payload::Range(d), Self::model(&[self.cfg.sigma_t]))
            }
            DirectKind::BearingRange => self.bearing_payload(from, to.translation()),
        }
    }

    fn outlier_payload(&mut self, payload: &Payload, from: &Pose) -> Payload {
        match payload {
            Payload::Pose(_) => {
                let target = self.random_pose();
                Payload::Pose(from.between(&target))
            }
            Payload::Range(_) => Payload::Range(self.rng.random_range(0.0..self.cfg.observation_range)),
            Payload::BearingRange { bearing, .. } => {
                let target = *self.random_pose().translation();
                let br = bearing_range_of(&from.inverse_transform_point(&target), bearing.len());
                Payload::BearingRange {
                    bearing: br.iter().take(bearing.len()).copied().collect(),
                    range: br[bearing.len()],
                }
            }
            Payload::Point(p) => Payload::Point(p.iter().map(|_| self.rng.random_range(-10.0..10.0)).collect()),
        }
    }
}

fn within(a: &Pose, b: &Vector3<f64>, range: f64) -> bool {
    (a.translation() - b).norm() <= range
}

/// Generates a dataset; a pure function of `cfg`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let dim = cfg.mobility.dim();
    let robots: Vec<RobotId> = (0..cfg.robots as RobotId).collect();
    let truth: BTreeMap<RobotId, Vec<Pose>> = robots.iter().map(|r| (*r, g.trajectory())).collect();
    let landmarks: BTreeMap<u64, Vec<f64>> = (0..cfg.num_landmarks as u64)
        .map(|id| {
            let p = g.random_pose();
            (id, p.translation().as_slice()[..dim].to_vec())
        })
        .collect();
    let anchor_sigmas = vec![ANCHOR_SIGMA; tangent_dim(dim)];
    let mut records = Vec::new();
    for &r in &robots {
        records.push(Record {
            robot: r,
            step: 0,
            class: MeasurementClass::Prior,
            keys: vec![VariableKey::pose(r, 0)],
            payload: Payload::Pose(truth[&r][0]),
            sigmas: anchor_sigmas.clone(),
            inlier: true,
        });
    }
    let range = cfg.observation_range;
    let p_loop = cfg.loop_probability;
    for k in 1..cfg.length {
        for &r in &robots {
            let traj = &truth[&r];
            let cur = traj[k];
            let (payload, sigmas) = g.noisy_pose(traj[k - 1].between(&cur));
            let key = |rr: RobotId, i: usize| VariableKey::pose(rr, i as u64);
            let mut push = |class, keys, (payload, sigmas): (Payload, Vec<f64>)| {
                records.push(Record {
                    robot: r,
                    step: k as u64,
                    class,
                    keys,
                    payload,
                    sigmas,
                    inlier: true,
                })
            };
            push(MeasurementClass::Odometry, vec![key(r, k - 1), key(r, k)], (payload, sigmas));
            if cfg.intra_loops && g.rng.random_bool(p_loop) {
                let cands: Vec<usize> = (0..k.saturating_sub(1)).filter(|&j| within(&cur, traj[j].translation(), range)).collect();
                if !cands.is_empty() {
                    let j = cands[g.rng.random_range(0..cands.len())];
                    let m = g.noisy_pose(traj[j].between(&cur));
                    push(MeasurementClass::IntraLoop, vec![key(r, j), key(r, k)], m);
                }
            }
            if let Some(kind) = cfg.direct_inter {
                if g.rng.random_bool(p_loop) {
                    let cands: Vec<RobotId> = robots
                        .iter()
                        .copied()
                        .filter(|s| *s != r && within(&cur, truth[s][k].translation(), range))
                        .filter(|s| kind == DirectKind::RelativePose || !within(&cur, truth[s][k].translation(), MIN_SEPARATION))
                        .collect();
                    if !cands.is_empty() {
                        let s = cands[g.rng.random_range(0..cands.len())];
                        let m = g.direct_payload(kind, &cur, &truth[&s][k]);
                        push(MeasurementClass::DirectInter, vec![key(r, k), key(s, k)], m);
                    }
                }
            }
            if cfg.indirect_inter && g.rng.random_bool(p_loop) {
                let cands: Vec<(RobotId, usize)> = robots
                    .iter()
                    .filter(|s| **s != r)
                    .flat_map(|s| (0..k).map(move |j| (*s, j)))
                    .filter(|(s, j)| within(&cur, truth[s][*j].translation(), range))
                    .collect();
                if !cands.is_empty() {
                    let (s, j) = cands[g.rng.random_range(0..cands.len())];
                    let m = g.noisy_pose(cur.between(&truth[&s][j]));
                    push(MeasurementClass::IndirectInter, vec![key(r, k), key(s, j)], m);
                }
            }
            if cfg.landmark_obs {
                for (id, lm) in &landmarks {
                    let mut pos = Vector3::zeros();
                    pos.as_mut_slice()[..dim].copy_from_slice(lm);
                    if !within(&cur, &pos, range) || within(&cur, &pos, MIN_SEPARATION) || !g.rng.random_bool(p_loop) {
                        continue;
                    }
                    let local = cur.inverse_transform_point(&pos);
                    let point: Vec<f64> = (0..dim).map(|i| local[i] + g.normal(cfg.sigma_t)).collect();
                    let sig = Generator::model(&vec![cfg.sigma_t; dim]);
                    push(MeasurementClass::Landmark, vec![key(r, k), VariableKey::landmark(*id)], (Payload::Point(point), sig));
                }
            }
        }
    }

    let loops: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.class.is_loop_closure())
        .map(|(i, _)| i)
        .collect();
    let n_out = (cfg.outlier_fraction * loops.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = sample(&mut g.rng, loops.len(), n_out).into_iter().map(|i| loops[i]).collect();
    chosen.sort_unstable();
    for i in chosen {
        let rec = &records[i];
        let from = match rec.payload {
            Payload::Pose(_) if rec.class == MeasurementClass::IntraLoop => truth[&rec.robot][rec.keys[0].index as usize],
            _ => truth[&rec.robot][rec.step as usize],
        };
        let payload = g.outlier_payload(&rec.payload.clone(), &from);
        records[i].payload = payload;
        records[i].inlier = false;
    }

    let mut meta = BTreeMap::new();
    meta.insert("scenario".to_string(), cfg.name.clone());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    Ok(Dataset {
        meta,
        dim,
        truth,
        landmarks,
        records,
    })
}

/// Landmark ground truth as a vector.
pub fn landmark_vector(ds: &Dataset, id: u64) -> Option<DVector<f64>> {
    ds.landmarks.get(&id).map(|p| DVector::from_column_slice(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::chi2_95;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            robots: 3,
            length: 60,
            seed,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn pinned_defaults() {
        assert_eq!((OUTLIER_FRACTION_MIN, OUTLIER_FRACTION_MAX), (0.10, 0.25));
        let c = ScenarioConfig::default();
        assert_eq!((c.robots, c.length), (6, 1000));
        let d = c.desk();
        assert_eq!((d.robots, d.length), (3, 100));
        assert_eq!(d.loop_probability, 0.2);
        for name in ScenarioConfig::preset_names() {
            ScenarioConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ScenarioConfig::preset("nope").is_none());
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
        assert_ne!(generate(&small(5)).unwrap(), generate(&small(6)).unwrap());
    }

    #[test]
    fn zero_noise_is_exact() {
        let cfg = ScenarioConfig {
            sigma_r: 0.0,
            sigma_rz: 0.0,
            sigma_t: 0.0,
            outlier_fraction: 0.0,
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        let gt = ds.ground_truth();
        for rec in &ds.records {
            let f = rec.factor().unwrap();
            assert!(f.error_at(&rec.keys.iter().map(|k| gt.get(k).unwrap()).collect::<Vec<_>>()).unwrap().amax() < 1e-12);
        }
    }

    #[test]
    fn planar_states_stay_upright() {
        let ds = generate(&ScenarioConfig {
            mobility: Mobility::Planar3d,
            ..small(2)
        })
        .unwrap();
        for traj in ds.truth.values() {
            for p in traj {
                let (roll, pitch, _) = match p.rotation() {
                    Rotation::Spatial(q) => q.euler_angles(),
                    Rotation::Planar(_) => unreachable!(),
                };
                assert!(roll.abs() < 1e-12 && pitch.abs() < 1e-12);
                assert_eq!(p.translation().z, 0.0);
            }
        }
    }

    #[test]
    fn outlier_fraction_window() {
        for seed in 0..50 {
            let ds = generate(&small(seed)).unwrap();
            let f = ds.outlier_fraction().unwrap();
            assert!((0.07..=0.28).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn inlier_noise_is_calibrated() {
        // 95th percentile of whitened squared residuals at ground truth.
        for name in ["cpgo-planar", "cpgo-3d", "bearing-range", "range", "landmark"] {
            let mut by_dim: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut seed = 0;
            while by_dim.values().map(Vec::len).sum::<usize>() < 10_000 {
                let cfg = ScenarioConfig {
                    seed,
                    ..ScenarioConfig::preset(name).unwrap().desk()
                };
                let ds = generate(&cfg).unwrap();
                let gt = ds.ground_truth();
                for rec in ds.records.iter().filter(|r| r.inlier && r.class != MeasurementClass::Prior) {
                    let f = rec.factor().unwrap();
                    by_dim.entry(f.dim()).or_default().push(f.squared_error(&gt).unwrap());
                }
                seed += 1;
            }
            for (d, mut v) in by_dim {
                if v.len() < 2000 {
                    continue;
                }
                v.sort_by(f64::total_cmp);
                let p95 = v[(0.95 * v.len() as f64) as usize];
                let rel = (p95 - chi2_95(d)) / chi2_95(d);
                assert!(rel.abs() < 0.05, "{name} dim {d}: {p95} vs {}", chi2_95(d));
            }
        }
    }

    #[test]
    fn shared_keys_exist_in_counterpart_truth() {
        let ds = generate(&small(3)).unwrap();
        let gt = ds.ground_truth();
        let mut inter = 0;
        for rec in &ds.records {
            for k in rec.foreign_keys() {
                assert!(gt.contains(k));
                inter += 1;
            }
        }
        assert!(inter > 0);
    }

    #[test]
    fn round_trip_is_lossless() {
        for name in ScenarioConfig::preset_names() {
            let cfg = ScenarioConfig {
                robots: 2,
                length: 30,
                ..ScenarioConfig::preset(name).unwrap()
            };
            let ds = generate(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.txt");
            ds.save(&path).unwrap();
            assert_eq!(Dataset::load(&path).unwrap(), ds, "{name}");
        }
    }

    #[test]
    fn parse_errors_name_line() {
        let err = "META format_version 1\nMETA dim 2\nBOGUS 1 2\n".parse::<Dataset>().unwrap_err();
        assert!(matches!(err, DataError::UnknownTag { line: 3, ref tag } if tag == "BOGUS"));
        let err = "META format_version 2\n".parse::<Dataset>().unwrap_err();
        assert!(matches!(err, DataError::Version { .. }));
        let err = "META format_version 1\nMETA dim 2\nGT_POSE 0 0 1.0 2.0\n".parse::<Dataset>().unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }));
    }

    #[test]
    fn odometry_only_file_loads() {
        let text = "META format_version 1\nMETA dim 2\nROBOT 0\nGT_POSE 0 0 0 0 0\nGT_POSE 0 1 1 0 0\n\
                    ODOM 0 0 1 1 0 0 0.01 0.05 0.05\nROBOT 1\nGT_POSE 1 0 0 2 0\n\
                    LOOP indirect pose 1 0 r1:0 r0:1 1 -2 0 0.01 0.05 0.05 1\n";
        let ds: Dataset = text.parse().unwrap();
        assert!(ds.landmarks.is_empty());
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.stream(1, 0), vec![0]);
        assert_eq!(ds.stream(0, 1), vec![1]);
    }

    #[test]
    fn infeasible_configs_rejected() {
        let bad = [
            ScenarioConfig {
                landmark_obs: true,
                num_landmarks: 0,
                ..small(0)
            },
            ScenarioConfig {
                outlier_fraction: 0.5,
                ..small(0)
            },
            ScenarioConfig { robots: 0, ..small(0) },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(DataError::InvalidScenario(_))));
        }
    }
}
