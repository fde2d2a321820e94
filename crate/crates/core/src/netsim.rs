//! Discrete-event simulator for the ad-hoc robot network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::factors::RobotId;

pub const TWO_GENERALS_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Initiation rate per robot pair, in events per step.
    pub rate: f64,
    /// Maximum communication range in meters.
    pub max_range: f64,
    pub success: f64,
    /// Steps between initiation and completion.
    pub delay: u64,
    /// Fraction of otherwise successful exchanges delivered to one side only.
    pub two_generals_rate: f64,
    pub seed: u64,
    /// Lets a robot hold in-flight exchanges with several neighbors at once.
    pub parallel: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            rate: 1.0,
            max_range: 30.0,
            success: 0.9,
            delay: 0,
            two_generals_rate: TWO_GENERALS_RATE,
            seed: 0,
            parallel: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return bad("rate must be nonnegative");
        }
        if !(self.max_range >= 0.0) {
            return bad("max_range must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.success) {
            return bad("success probability must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.two_generals_rate) {
            return bad("two_generals_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Success,
    Fail,
    /// Only this robot receives the result.
    OneSided(RobotId),
}

impl Outcome {
    pub fn delivers_to(&self, robot: RobotId) -> bool {
        match self {
            Outcome::Success => true,
            Outcome::Fail => false,
            Outcome::OneSided(r) => *r == robot,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => write!(f, "success"),
            Outcome::Fail => write!(f, "fail"),
            Outcome::OneSided(r) => write!(f, "one_sided:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommEvent {
    pub id: u64,
    /// Robot pair with `i < j`.
    pub i: RobotId,
    pub j: RobotId,
    pub initiated: u64,
    pub completes: u64,
    pub outcome: Outcome,
    pub payload_bytes: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct NetSim {
    config: NetworkConfig,
    rng: ChaCha8Rng,
    in_flight: BTreeMap<u64, CommEvent>,
    log: Vec<CommEvent>,
    next_id: u64,
}

impl NetSim {
    pub fn new(config: NetworkConfig) -> Result<Self, NetError> {
        config.validate()?;
        Ok(NetSim {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            in_flight: BTreeMap::new(),
            log: Vec::new(),
            next_id: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn busy(&self) -> (BTreeSet<(RobotId, RobotId)>, BTreeSet<RobotId>) {
        let pairs = self.in_flight.values().map(|e| (e.i, e.j)).collect();
        let robots = self.in_flight.values().flat_map(|e| [e.i, e.j]).collect();
        (pairs, robots)
    }

    /// Starts new exchanges between robots in range at step `t`.
    pub fn step(&mut self, t: u64, positions: &BTreeMap<RobotId, Vector3<f64>>) -> Vec<CommEvent> {
        let p_init = self.config.rate.min(1.0);
        let (mut busy_pairs, mut busy_robots) = self.busy();
        let robots: Vec<(RobotId, Vector3<f64>)> = positions.iter().map(|(r, p)| (*r, *p)).collect();
        let mut candidates: Vec<(usize, usize)> = (0..robots.len()).flat_map(|a| (a + 1..robots.len()).map(move |b| (a, b))).collect();
        candidates.shuffle(&mut self.rng);
        let mut started = Vec::new();
        for (a, b) in candidates {
            let ((i, pi), (j, pj)) = (&robots[a], &robots[b]);
            if (pi - pj).norm() > self.config.max_range || busy_pairs.contains(&(*i, *j)) {
                continue;
            }
            if !self.config.parallel && (busy_robots.contains(i) || busy_robots.contains(j)) {
                continue;
            }
            if !self.rng.random_bool(p_init) {
                continue;
            }
            let (u_ok, u_tg, u_side): (f64, f64, bool) = (self.rng.random(), self.rng.random(), self.rng.random());
            let outcome = if u_ok >= self.config.success {
                Outcome::Fail
            } else if u_tg < self.config.two_generals_rate {
                Outcome::OneSided(if u_side { *i } else { *j })
            } else {
                Outcome::Success
            };
            let ev = CommEvent {
                id: self.next_id,
                i: *i,
                j: *j,
                initiated: t,
                completes: t + self.config.delay,
                outcome,
                payload_bytes: None,
            };
            self.next_id += 1;
            busy_pairs.insert((*i, *j));
            busy_robots.insert(*i);
            busy_robots.insert(*j);
            self.in_flight.insert(ev.id, ev.clone());
            started.push(ev);
        }
        started
    }

    /// Removes and returns the exchanges that finish at step `t`.
    pub fn completed(&mut self, t: u64) -> Vec<CommEvent> {
        let due: Vec<u64> = self.in_flight.values().filter(|e| e.completes <= t).map(|e| e.id).collect();
        let mut out = Vec::with_capacity(due.len());
        for id in due {
            let ev = self.in_flight.remove(&id).expect("due event");
            self.log.push(ev.clone());
            out.push(ev);
        }
        out
    }

    /// Records the payload size of a logged event.
    pub fn set_payload(&mut self, id: u64, bytes: usize) {
        if let Some(e) = self.log.iter_mut().rev().find(|e| e.id == id) {
            e.payload_bytes = Some(bytes);
        }
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &CommEvent> {
        self.in_flight.values()
    }

    /// Completed events in completion order.
    pub fn log(&self) -> &[CommEvent] {
        &self.log
    }

    /// Tab-separated log: initiation step, completion step, i, j, outcome, payload bytes.
    pub fn write_log<W: Write>(&self, w: W) -> io::Result<()> {
        write_events(&self.log, w)
    }
}

/// Writes events in the tab-separated log format.
pub fn write_events<W: Write>(events: &[CommEvent], mut w: W) -> io::Result<()> {
    for e in events {
        let bytes = e.payload_bytes.map(|b| b.to_string()).unwrap_or_else(|| "0".into());
        writeln!(w, "{}\t{}\t{}\t{}\t{}\t{}", e.initiated, e.completes, e.i, e.j, e.outcome, bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn line(n: usize, spacing: f64) -> BTreeMap<RobotId, Vector3<f64>> {
        (0..n as RobotId).map(|r| (r, Vector3::new(r as f64 * spacing, 0.0, 0.0))).collect()
    }

    #[test]
    fn pinned_defaults() {
        let c = NetworkConfig::default();
        assert_eq!(c.two_generals_rate, 0.05);
        assert_eq!((c.rate, c.max_range, c.success), (1.0, 30.0, 0.9));
    }

    #[test]
    fn every_pair_gets_a_turn_without_parallelism() {
        let mut sim = NetSim::new(NetworkConfig::default()).unwrap();
        let mut counts: BTreeMap<(RobotId, RobotId), usize> = BTreeMap::new();
        for t in 0..300 {
            for e in sim.step(t, &line(3, 1.0)) {
                *counts.entry((e.i, e.j)).or_default() += 1;
            }
            sim.completed(t);
        }
        assert_eq!(counts.len(), 3);
        assert!(counts.values().all(|&c| (70..=130).contains(&c)), "{counts:?}");
    }

    #[test]
    fn out_of_range_never_talks() {
        let mut sim = NetSim::new(NetworkConfig::default()).unwrap();
        for t in 0..100 {
            assert!(sim.step(t, &line(2, 40.0)).is_empty());
        }
    }

    #[test]
    fn perfect_network_completes_immediately() {
        let cfg = NetworkConfig {
            success: 1.0,
            two_generals_rate: 0.0,
            ..NetworkConfig::default()
        };
        let mut sim = NetSim::new(cfg).unwrap();
        for t in 0..50 {
            let started = sim.step(t, &line(2, 10.0));
            assert_eq!(started.len(), 1);
            let done = sim.completed(t);
            assert_eq!(done.len(), 1);
            assert_eq!(done[0].outcome, Outcome::Success);
            assert_eq!(done[0].completes, t);
        }
    }

    #[test]
    fn delay_keeps_pair_busy() {
        let cfg = NetworkConfig {
            delay: 2,
            ..NetworkConfig::default()
        };
        let mut sim = NetSim::new(cfg).unwrap();
        assert_eq!(sim.step(0, &line(2, 1.0)).len(), 1);
        assert!(sim.completed(0).is_empty());
        assert!(sim.step(1, &line(2, 1.0)).is_empty());
        assert!(sim.completed(1).is_empty());
        let done = sim.completed(2);
        assert_eq!(done.len(), 1);
        assert_eq!((done[0].initiated, done[0].completes), (0, 2));
    }

    #[test]
    fn serial_mode_limits_each_robot() {
        let cfg = NetworkConfig {
            delay: 5,
            ..NetworkConfig::default()
        };
        let mut serial = NetSim::new(cfg.clone()).unwrap();
        serial.step(0, &line(4, 1.0));
        let mut per_robot: BTreeMap<RobotId, usize> = BTreeMap::new();
        for e in serial.in_flight() {
            *per_robot.entry(e.i).or_default() += 1;
            *per_robot.entry(e.j).or_default() += 1;
        }
        assert!(per_robot.values().all(|&n| n <= 1));
        let mut par = NetSim::new(NetworkConfig { parallel: true, ..cfg }).unwrap();
        par.step(0, &line(4, 1.0));
        assert_eq!(par.in_flight().count(), 6);
    }

    #[test]
    fn outcome_frequencies() {
        let mut sim = NetSim::new(NetworkConfig {
            seed: 11,
            ..NetworkConfig::default()
        })
        .unwrap();
        let mut counts = [0usize; 3];
        let mut t = 0;
        while counts.iter().sum::<usize>() < 20_000 {
            sim.step(t, &line(2, 1.0));
            for e in sim.completed(t) {
                match e.outcome {
                    Outcome::Success => counts[0] += 1,
                    Outcome::OneSided(_) => counts[1] += 1,
                    Outcome::Fail => counts[2] += 1,
                }
            }
            t += 1;
        }
        let n = counts.iter().sum::<usize>() as f64;
        let frac = counts.map(|c| c as f64 / n);
        assert!((frac[0] - 0.9 * 0.95).abs() < 0.02, "{frac:?}");
        assert!((frac[1] - 0.9 * 0.05).abs() < 0.02, "{frac:?}");
        assert!((frac[2] - 0.1).abs() < 0.02, "{frac:?}");
    }

    fn log_hash(seed: u64) -> Vec<u8> {
        let mut sim = NetSim::new(NetworkConfig {
            seed,
            rate: 0.3,
            delay: 1,
            ..NetworkConfig::default()
        })
        .unwrap();
        for t in 0..500 {
            let pos = line(4, 5.0 + (t % 7) as f64 * 2.0);
            sim.step(t, &pos);
            for e in sim.completed(t) {
                sim.set_payload(e.id, (e.i + e.j) as usize * 10);
            }
        }
        let mut buf = Vec::new();
        sim.write_log(&mut buf).unwrap();
        Sha256::digest(&buf).to_vec()
    }

    #[test]
    fn replay_is_hash_equal() {
        assert_eq!(log_hash(3), log_hash(3));
        assert_ne!(log_hash(3), log_hash(4));
    }

    #[test]
    fn log_format() {
        let mut sim = NetSim::new(NetworkConfig::default()).unwrap();
        sim.step(4, &line(2, 1.0));
        let e = sim.completed(4).remove(0);
        sim.set_payload(e.id, 128);
        let mut buf = Vec::new();
        sim.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let fields: Vec<&str> = text.trim_end().split('\t').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(&fields[..4], &["4", "4", "0", "1"]);
        assert_eq!(fields[5], "128");
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            NetworkConfig { success: 1.5, ..NetworkConfig::default() },
            NetworkConfig { rate: -1.0, ..NetworkConfig::default() },
            NetworkConfig { two_generals_rate: -0.1, ..NetworkConfig::default() },
        ] {
            assert!(NetSim::new(cfg).is_err());
        }
    }

    proptest! {
        #[test]
        fn pairs_never_overlap(seed in 0u64..1000, delay in 0u64..4, parallel: bool) {
            let mut sim = NetSim::new(NetworkConfig { seed, delay, parallel, ..NetworkConfig::default() }).unwrap();
            for t in 0..40 {
                sim.step(t, &line(4, 8.0));
                let pairs: Vec<_> = sim.in_flight().map(|e| (e.i, e.j)).collect();
                let unique: BTreeSet<_> = pairs.iter().copied().collect();
                prop_assert_eq!(pairs.len(), unique.len());
                for e in sim.completed(t) {
                    prop_assert!(e.completes >= e.initiated);
                    prop_assert!(e.i < e.j);
                }
            }
        }
    }
}
