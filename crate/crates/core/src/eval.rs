//! Trajectory and classification metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::data::{fmt_nums, fmt_pose, pose_from_fields};
use crate::factors::{Value, Values, VarKind, VariableKey};

/// Relative singular-value floor below which a point cloud counts as collinear.
pub const COLLINEAR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("alignment needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("correspondences are collinear")]
    Degenerate,
    #[error("estimate and reference cover different poses ({missing} missing, {extra} extra)")]
    KeyMismatch { missing: usize, extra: usize },
    #[error("empty series")]
    Empty,
    #[error("step {0} must be positive")]
    NonPositiveStep(u64),
    #[error("steps must strictly increase ({prev} then {next})")]
    NonIncreasing { prev: u64, next: u64 },
    #[error("{predicted} predictions for {labels} labels")]
    LengthMismatch { predicted: usize, labels: usize },
    #[error("history line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

/// `p ↦ R p + t`; planar transforms rotate about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Rigid (no scale) least-squares alignment of `est` onto `reference`.
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>], dim: usize) -> Result<RigidTransform, EvalError> {
    assert!(dim == 2 || dim == 3, "dim must be 2 or 3");
    let n = est.len();
    if n != reference.len() {
        return Err(EvalError::LengthMismatch {
            predicted: n,
            labels: reference.len(),
        });
    }
    if n < 3 {
        return Err(EvalError::TooFewPoints(n));
    }
    let mean = |pts: &[Vector3<f64>]| pts.iter().sum::<Vector3<f64>>() / n as f64;
    let (me, mr) = (mean(est), mean(reference));
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut spread = DMatrix::<f64>::zeros(dim, dim);
    for (e, r) in est.iter().zip(reference) {
        let (de, dr) = (e - me, r - mr);
        for a in 0..dim {
            for b in 0..dim {
                h[(a, b)] += de[a] * dr[b];
                spread[(a, b)] += dr[a] * dr[b];
            }
        }
    }
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= COLLINEAR_TOLERANCE * ev[0] {
        return Err(EvalError::Degenerate);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let mut d = DMatrix::<f64>::identity(dim, dim);
    if (&v * u.transpose()).determinant() < 0.0 {
        d[(dim - 1, dim - 1)] = -1.0;
    }
    let r = v * d * u.transpose();
    let mut rotation = Matrix3::identity();
    for a in 0..dim {
        for b in 0..dim {
            rotation[(a, b)] = r[(a, b)];
        }
    }
    Ok(RigidTransform {
        rotation,
        translation: mr - rotation * me,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ate {
    /// RMS translation error, meters.
    pub translation: f64,
    /// RMS rotation error, radians.
    pub rotation: f64,
    /// Set when the poses were too degenerate to rotate and only centroids were matched.
    pub centroid_only: bool,
}

fn pose_keys(v: &Values) -> Vec<VariableKey> {
    v.iter().filter(|(_, val)| val.as_pose().is_some()).map(|(k, _)| *k).collect()
}

/// Aligned RMS error over every pose in `reference`, pooled across robots.
pub fn ate(est: &Values, reference: &Values) -> Result<Ate, EvalError> {
    let keys = pose_keys(reference);
    let missing = keys.iter().filter(|k| est.pose(k).is_none()).count();
    let extra = pose_keys(est).iter().filter(|k| reference.pose(k).is_none()).count();
    if missing + extra > 0 {
        return Err(EvalError::KeyMismatch { missing, extra });
    }
    if keys.is_empty() {
        return Err(EvalError::Empty);
    }
    let dim = reference.pose(&keys[0]).map(|p| p.dim()).unwrap_or(3);
    let e: Vec<Vector3<f64>> = keys.iter().map(|k| *est.pose(k).unwrap().translation()).collect();
    let r: Vec<Vector3<f64>> = keys.iter().map(|k| *reference.pose(k).unwrap().translation()).collect();
    let (align, centroid_only) = match umeyama_align(&e, &r, dim) {
        Ok(t) => (t, false),
        Err(EvalError::TooFewPoints(_) | EvalError::Degenerate) => {
            let n = e.len() as f64;
            let shift = r.iter().sum::<Vector3<f64>>() / n - e.iter().sum::<Vector3<f64>>() / n;
            (
                RigidTransform {
                    rotation: Matrix3::identity(),
                    translation: shift,
                },
                true,
            )
        }
        Err(other) => return Err(other),
    };
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    for (i, k) in keys.iter().enumerate() {
        t_sq += (align.apply(&e[i]) - r[i]).norm_squared();
        let re = align.rotation * est.pose(k).unwrap().rotation().matrix3();
        let rr = reference.pose(k).unwrap().rotation().matrix3();
        let m = rr.transpose() * re;
        let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
        r_sq += s.atan2((m.trace() - 1.0) / 2.0).powi(2);
    }
    let n = keys.len() as f64;
    Ok(Ate {
        translation: (t_sq / n).sqrt(),
        rotation: (r_sq / n).sqrt(),
        centroid_only,
    })
}

/// Linearly time-weighted mean: `Σ_k (k / Σk) · m_k`.
pub fn incremental(series: &[(u64, f64)]) -> Result<f64, EvalError> {
    if series.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some((k, _)) = series.iter().find(|(k, _)| *k == 0) {
        return Err(EvalError::NonPositiveStep(*k));
    }
    let total: f64 = series.iter().map(|(k, _)| *k as f64).sum();
    let weights: Vec<f64> = series.iter().map(|(k, _)| *k as f64 / total).collect();
    debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    Ok(series.iter().zip(&weights).map(|((_, m), w)| w * m).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A ratio had a zero denominator and was taken as 1.
    pub degenerate: bool,
}

/// Classification quality with "inlier" as the positive class.
pub fn f1(predicted: &[bool], labels: &[bool]) -> Result<F1Score, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, l) in predicted.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fneg);
    let degenerate = p.is_none() || r.is_none();
    let (precision, recall) = (p.unwrap_or(1.0), r.unwrap_or(1.0));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    if degenerate {
        log::debug!("f1 with empty class: tp={tp} fp={fp} fn={fneg}");
    }
    Ok(F1Score {
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// Scores record-indexed classifications against record-indexed labels.
pub fn f1_indexed(predicted: &BTreeMap<usize, bool>, labels: &BTreeMap<usize, bool>) -> Result<F1Score, EvalError> {
    let mut p = Vec::with_capacity(predicted.len());
    let mut l = Vec::with_capacity(predicted.len());
    for (idx, pred) in predicted {
        let label = labels.get(idx).ok_or(EvalError::LengthMismatch {
            predicted: predicted.len(),
            labels: labels.len(),
        })?;
        p.push(*pred);
        l.push(*label);
    }
    f1(&p, &l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub ate: f64,
    pub ate_rotation: f64,
    /// `None` until some loop closure has been classified.
    pub f1: Option<F1Score>,
    /// Wall-clock seconds spent in this step's updates.
    pub update_seconds: f64,
}

/// Metrics for the joint estimate after one step.
pub fn step_metrics(
    step: u64,
    estimate: &Values,
    truth: &Values,
    classifications: &BTreeMap<usize, bool>,
    labels: &BTreeMap<usize, bool>,
) -> Result<StepMetrics, EvalError> {
    let mut reference = Values::new();
    for k in pose_keys(estimate) {
        if let Some(v) = truth.get(&k) {
            reference.insert(k, v.clone());
        }
    }
    let a = ate(estimate, &reference)?;
    let f = if classifications.is_empty() {
        None
    } else {
        Some(f1_indexed(classifications, labels)?)
    };
    Ok(StepMetrics {
        step,
        ate: a.translation,
        ate_rotation: a.rotation,
        f1: f,
        update_seconds: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub iate: f64,
    pub final_ate: f64,
    pub final_ate_rotation: f64,
    pub if1: f64,
    pub final_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub series: Vec<StepMetrics>,
}

impl MetricReport {
    /// Summarizes a per-step series. Steps are shifted by one so the first step has weight.
    pub fn from_series(series: Vec<StepMetrics>) -> Result<Self, EvalError> {
        for w in series.windows(2) {
            if w[1].step <= w[0].step {
                return Err(EvalError::NonIncreasing {
                    prev: w[0].step,
                    next: w[1].step,
                });
            }
        }
        let last = series.last().ok_or(EvalError::Empty)?;
        let ate_series: Vec<(u64, f64)> = series.iter().map(|s| (s.step + 1, s.ate)).collect();
        let f1_series: Vec<(u64, f64)> = series.iter().filter_map(|s| s.f1.map(|f| (s.step + 1, f.f1))).collect();
        let final_f1 = last.f1.unwrap_or(F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            degenerate: true,
        });
        Ok(MetricReport {
            iate: incremental(&ate_series)?,
            final_ate: last.ate,
            final_ate_rotation: last.ate_rotation,
            if1: if f1_series.is_empty() { 1.0 } else { incremental(&f1_series)? },
            final_f1: final_f1.f1,
            precision: final_f1.precision,
            recall: final_f1.recall,
            series,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub step: u64,
    pub estimate: Values,
    /// Record index to predicted inlier flag.
    pub classifications: BTreeMap<usize, bool>,
}

/// Recorded joint estimates and classifications, one entry per sampled step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolutionHistory {
    entries: Vec<HistoryEntry>,
}

impl SolutionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: HistoryEntry) -> Result<(), EvalError> {
        if let Some(prev) = self.entries.last() {
            if entry.step <= prev.step {
                return Err(EvalError::NonIncreasing {
                    prev: prev.step,
                    next: entry.step,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evaluate(&self, truth: &Values, labels: &BTreeMap<usize, bool>) -> Result<MetricReport, EvalError> {
        let series = self
            .entries
            .iter()
            .map(|e| step_metrics(e.step, &e.estimate, truth, &e.classifications, labels))
            .collect::<Result<Vec<_>, _>>()?;
        MetricReport::from_series(series)
    }

    /// Lines `STEP k`, `EST <key> <values...>`, `CLS <record> <0|1>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "STEP {}", e.step).unwrap();
            for (k, v) in e.estimate.iter() {
                let nums = match v {
                    Value::Pose(p) => fmt_pose(p),
                    Value::Point(p) => fmt_nums(p.as_slice()),
                };
                writeln!(out, "EST {k} {nums}").unwrap();
            }
            for (idx, c) in &e.classifications {
                writeln!(out, "CLS {idx} {}", u8::from(*c)).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EvalError> {
        let mut hist = SolutionHistory::new();
        let mut cur: Option<HistoryEntry> = None;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: &str| EvalError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut f = line.split_whitespace();
            match f.next() {
                None => continue,
                Some("STEP") => {
                    if let Some(e) = cur.take() {
                        hist.push(e)?;
                    }
                    let step = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad step"))?;
                    cur = Some(HistoryEntry {
                        step,
                        estimate: Values::new(),
                        classifications: BTreeMap::new(),
                    });
                }
                Some("EST") => {
                    let e = cur.as_mut().ok_or_else(|| err("EST before STEP"))?;
                    let key: VariableKey = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad key"))?;
                    let nums = f.map(str::parse::<f64>).collect::<Result<Vec<_>, _>>().map_err(|_| err("bad number"))?;
                    let value = match key.kind {
                        VarKind::Pose => Value::Pose(pose_from_fields(&nums).ok_or_else(|| err("bad pose"))?),
                        VarKind::Landmark => Value::point(&nums),
                    };
                    e.estimate.insert(key, value);
                }
                Some("CLS") => {
                    let e = cur.as_mut().ok_or_else(|| err("CLS before STEP"))?;
                    let idx = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad record index"))?;
                    let c = match f.next() {
                        Some("0") => false,
                        Some("1") => true,
                        _ => return Err(err("bad classification")),
                    };
                    e.classifications.insert(idx, c);
                }
                Some(tag) => return Err(err(&format!("unknown tag `{tag}`"))),
            }
        }
        if let Some(e) = cur.take() {
            hist.push(e)?;
        }
        Ok(hist)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
