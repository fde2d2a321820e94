use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Vector3};

use crate::manifold::{ManifoldError, Pose};

pub type RobotId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Robot(RobotId),
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    Pose,
    Landmark,
}

/// Identifies a variable across the whole team: `(owner, kind, index)`.
///
/// The derived order (owner, then kind, then index) is the iteration order
/// used everywhere determinism matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableKey {
    pub owner: Owner,
    pub kind: VarKind,
    pub index: u64,
}

impl VariableKey {
    pub fn pose(robot: RobotId, index: u64) -> Self {
        VariableKey {
            owner: Owner::Robot(robot),
            kind: VarKind::Pose,
            index,
        }
    }

    pub fn landmark(index: u64) -> Self {
        VariableKey {
            owner: Owner::Environment,
            kind: VarKind::Landmark,
            index,
        }
    }

    pub fn robot(&self) -> Option<RobotId> {
        match self.owner {
            Owner::Robot(r) => Some(r),
            Owner::Environment => None,
        }
    }

    pub fn is_environment(&self) -> bool {
        self.owner == Owner::Environment
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            VarKind::Pose => 'p',
            VarKind::Landmark => 'l',
        };
        match self.owner {
            Owner::Robot(r) if self.kind == VarKind::Pose => write!(f, "r{}:{}", r, self.index),
            Owner::Robot(r) => write!(f, "r{}:{}{}", r, kind, self.index),
            Owner::Environment => write!(f, "{}{}", kind, self.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed variable key '{0}'")]
pub struct KeyParseError(pub String);

impl FromStr for VariableKey {
    type Err = KeyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || KeyParseError(s.to_string());
        let (kind_idx, owner) = if let Some(rest) = s.strip_prefix('r') {
            let (robot, tail) = rest.split_once(':').ok_or_else(bad)?;
            let robot: RobotId = robot.parse().map_err(|_| bad())?;
            (tail, Owner::Robot(robot))
        } else {
            (s, Owner::Environment)
        };
        let (kind, digits) = match kind_idx.chars().next() {
            Some('p') => (VarKind::Pose, &kind_idx[1..]),
            Some('l') => (VarKind::Landmark, &kind_idx[1..]),
            Some(c) if c.is_ascii_digit() && owner != Owner::Environment => (VarKind::Pose, kind_idx),
            _ => return Err(bad()),
        };
        let index = digits.parse().map_err(|_| bad())?;
        Ok(VariableKey { owner, kind, index })
    }
}

/// A variable's state: a pose or a Euclidean point (landmark, scalar, ...).
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Pose(Pose),
    Point(DVector<f64>),
}

impl Value {
    pub fn point(coords: &[f64]) -> Self {
        Value::Point(DVector::from_column_slice(coords))
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            Value::Pose(p) => p.tangent_dim(),
            Value::Point(v) => v.len(),
        }
    }

    pub fn retract(&self, delta: &[f64]) -> Value {
        match self {
            Value::Pose(p) => Value::Pose(p.retract(delta)),
            Value::Point(v) => Value::Point(v + DVector::from_column_slice(delta)),
        }
    }

    /// Tangent-space difference `self ⊖ other` expressed at `other`.
    pub fn local_from(&self, other: &Value) -> Result<DVector<f64>, ManifoldError> {
        match (other, self) {
            (Value::Pose(a), Value::Pose(b)) => Ok(a.local(b)?.into_inner()),
            (Value::Point(a), Value::Point(b)) if a.len() == b.len() => Ok(b - a),
            _ => Err(ManifoldError::DimensionMismatch {
                expected: other.tangent_dim(),
                actual: self.tangent_dim(),
            }),
        }
    }

    pub fn as_pose(&self) -> Option<&Pose> {
        match self {
            Value::Pose(p) => Some(p),
            Value::Point(_) => None,
        }
    }

    pub fn as_point(&self) -> Option<&DVector<f64>> {
        match self {
            Value::Point(v) => Some(v),
            Value::Pose(_) => None,
        }
    }

    /// Position in space, zero-padded to three components.
    pub fn position(&self) -> Vector3<f64> {
        match self {
            Value::Pose(p) => *p.translation(),
            Value::Point(v) => {
                let mut out = Vector3::zeros();
                for (i, c) in v.iter().take(3).enumerate() {
                    out[i] = *c;
                }
                out
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Value::Pose(p) => p.is_finite(),
            Value::Point(v) => v.iter().all(|c| c.is_finite()),
        }
    }
}

/// Ordered map from variable key to state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values(BTreeMap<VariableKey, Value>);

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, value: Value) -> Option<Value> {
        self.0.insert(key, value)
    }

    pub fn insert_pose(&mut self, key: VariableKey, pose: Pose) {
        self.0.insert(key, Value::Pose(pose));
    }

    pub fn get(&self, key: &VariableKey) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn get_mut(&mut self, key: &VariableKey) -> Option<&mut Value> {
        self.0.get_mut(key)
    }

    pub fn pose(&self, key: &VariableKey) -> Option<&Pose> {
        self.0.get(key).and_then(Value::as_pose)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.0.contains_key(key)
    }

    pub fn remove(&mut self, key: &VariableKey) -> Option<Value> {
        self.0.remove(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &Value)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.0.keys()
    }

    pub fn extend(&mut self, other: Values) {
        self.0.extend(other.0);
    }
}

impl FromIterator<(VariableKey, Value)> for Values {
    fn from_iter<T: IntoIterator<Item = (VariableKey, Value)>>(iter: T) -> Self {
        Values(iter.into_iter().collect())
    }
}

impl IntoIterator for Values {
    type Item = (VariableKey, Value);
    type IntoIter = std::collections::btree_map::IntoIter<VariableKey, Value>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_display_parse() {
        for k in [
            VariableKey::pose(0, 12),
            VariableKey::pose(3, 0),
            VariableKey::landmark(7),
            VariableKey {
                owner: Owner::Robot(2),
                kind: VarKind::Landmark,
                index: 4,
            },
        ] {
            let s = k.to_string();
            assert_eq!(s.parse::<VariableKey>().unwrap(), k, "{s}");
        }
        assert!("x1".parse::<VariableKey>().is_err());
        assert!("r:1".parse::<VariableKey>().is_err());
    }

    #[test]
    fn key_order_is_total_and_grouped() {
        let mut ks = vec![
            VariableKey::landmark(0),
            VariableKey::pose(1, 0),
            VariableKey::pose(0, 5),
            VariableKey::pose(0, 1),
        ];
        ks.sort();
        assert_eq!(ks[0], VariableKey::pose(0, 1));
        assert_eq!(ks[3], VariableKey::landmark(0));
    }
}
