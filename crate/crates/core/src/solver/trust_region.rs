use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;

use super::linear::{Hessian, NormalBuilder};
use super::{FactorGraph, SolveReport, SolveStatus, SolverConfig, SolverError};
use crate::factors::{RobustKernel, Value, Values, VariableKey};

/// Damping used when the undamped normal equations are not positive definite.
const FALLBACK_DAMPING: f64 = 1e-9;
const MIN_RADIUS: f64 = 1e-12;

/// The part of a graph touching a set of active variables; everything else is held fixed.
pub(crate) struct Subproblem<'g> {
    graph: &'g FactorGraph,
    keys: Vec<VariableKey>,
    slot: BTreeMap<VariableKey, usize>,
    offsets: Vec<usize>,
    total: usize,
    factors: Vec<usize>,
    kernels: Vec<RobustKernel>,
}

impl<'g> Subproblem<'g> {
    pub fn new(
        graph: &'g FactorGraph,
        base: &Values,
        active: &BTreeSet<VariableKey>,
        kernel_of: &dyn Fn(usize) -> RobustKernel,
    ) -> Result<Self, SolverError> {
        let mut keys = Vec::with_capacity(active.len());
        let mut slot = BTreeMap::new();
        let mut offsets = Vec::with_capacity(active.len());
        let mut total = 0;
        for k in active {
            let v = base.get(k).ok_or(SolverError::MissingInit(*k))?;
            slot.insert(*k, keys.len());
            keys.push(*k);
            offsets.push(total);
            total += v.tangent_dim();
        }
        let factors: Vec<usize> = active
            .iter()
            .flat_map(|k| graph.factors_of(k).iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut anchored = false;
        for &f in &factors {
            let keys = graph.factor(f).keys();
            for k in keys {
                if !base.contains(k) {
                    return Err(SolverError::MissingInit(*k));
                }
            }
            if keys.len() == 1 || keys.iter().any(|k| !slot.contains_key(k)) {
                anchored = true;
            }
        }
        if !keys.is_empty() && !anchored {
            return Err(SolverError::Unconstrained);
        }
        let kernels = factors.iter().map(|&f| kernel_of(f)).collect();
        Ok(Subproblem {
            graph,
            keys,
            slot,
            offsets,
            total,
            factors,
            kernels,
        })
    }

    fn lookup<'a>(&self, key: &VariableKey, base: &'a Values, x: &'a [Value]) -> &'a Value {
        match self.slot.get(key) {
            Some(&s) => &x[s],
            None => base.get(key).expect("checked at construction"),
        }
    }

    pub fn cost(&self, base: &Values, x: &[Value]) -> Result<f64, SolverError> {
        let mut total = 0.0;
        for (fi, &f) in self.factors.iter().enumerate() {
            let factor = self.graph.factor(f);
            let vals: Vec<&Value> = factor.keys().iter().map(|k| self.lookup(k, base, x)).collect();
            let s = factor.whitened_at(&vals)?.norm_squared();
            total += 0.5 * self.kernels[fi].value(s);
        }
        Ok(total)
    }

    /// IRLS-weighted normal equations and robust cost at `x`.
    pub fn linearize(&self, base: &Values, x: &[Value], dense: bool) -> Result<(Hessian, DVector<f64>, f64), SolverError> {
        let mut nb = NormalBuilder::new(self.total, dense);
        let mut cost = 0.0;
        for (fi, &f) in self.factors.iter().enumerate() {
            let factor = self.graph.factor(f);
            let vals: Vec<&Value> = factor.keys().iter().map(|k| self.lookup(k, base, x)).collect();
            let slots: Vec<Option<usize>> = factor.keys().iter().map(|k| self.slot.get(k).copied()).collect();
            let wanted: Vec<bool> = slots.iter().map(Option::is_some).collect();
            let r = factor.whitened_at(&vals)?;
            let s = r.norm_squared();
            let kernel = self.kernels[fi];
            cost += 0.5 * kernel.value(s);
            let w = kernel.influence(s);
            let jac = factor.jacobian_masked(&vals, &wanted)?;
            for a in 0..slots.len() {
                let (Some(sa), Some(ja)) = (slots[a], jac[a].as_ref()) else {
                    continue;
                };
                let oa = self.offsets[sa];
                nb.add_gradient(oa, &(ja.transpose() * &r * w));
                for b in a..slots.len() {
                    let (Some(sb), Some(jb)) = (slots[b], jac[b].as_ref()) else {
                        continue;
                    };
                    let ob = self.offsets[sb];
                    let block = ja.transpose() * jb * w;
                    nb.add_block(oa, ob, &block);
                    if a != b {
                        nb.add_block(ob, oa, &block.transpose());
                    }
                }
            }
        }
        let (h, g) = nb.finish();
        Ok((h, g, cost))
    }

    pub fn retract(&self, x: &[Value], delta: &DVector<f64>) -> Vec<Value> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let n = v.tangent_dim();
                v.retract(&delta.as_slice()[self.offsets[i]..self.offsets[i] + n])
            })
            .collect()
    }

    pub fn initial(&self, base: &Values) -> Vec<Value> {
        self.keys.iter().map(|k| base.get(k).expect("checked").clone()).collect()
    }

    pub fn write_back(&self, base: &mut Values, x: Vec<Value>) {
        for (k, v) in self.keys.iter().zip(x) {
            base.insert(*k, v);
        }
    }

    /// Powell dogleg on the robust cost, accepting only cost-decreasing steps.
    pub fn run(&self, base: &Values, cfg: &SolverConfig) -> Result<SolveReport, SolverError> {
        cfg.validate()?;
        let mut x = self.initial(base);
        if self.total == 0 {
            let c = self.cost(base, &x)?;
            return Ok(SolveReport {
                values: base.clone(),
                status: SolveStatus::Converged,
                iterations: 0,
                initial_cost: c,
                final_cost: c,
            });
        }
        let dense = self.total <= cfg.dense_limit;
        let (mut h, mut g, mut f) = self.linearize(base, &x, dense)?;
        let initial_cost = f;
        let mut radius = cfg.initial_radius;
        let mut status = SolveStatus::MaxIterations;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            if g.amax() < cfg.gradient_tolerance {
                status = SolveStatus::Converged;
                break;
            }
            let neg_g = -&g;
            let gn = match h.solve(&neg_g, 0.0).or_else(|| h.solve(&neg_g, FALLBACK_DAMPING)) {
                Some(v) => v,
                None => {
                    status = SolveStatus::Singular;
                    break;
                }
            };
            let ghg = h.quad(&g);
            let sd = if ghg > 0.0 {
                &neg_g * (g.norm_squared() / ghg)
            } else {
                &neg_g * (radius / g.norm())
            };
            iterations += 1;
            let mut accepted = None;
            while radius > MIN_RADIUS {
                let step = dogleg(&gn, &sd, radius);
                let predicted = -(g.dot(&step) + 0.5 * h.quad(&step));
                let candidate = self.retract(&x, &step);
                let fc = self.cost(base, &candidate).unwrap_or(f64::INFINITY);
                let actual = f - fc;
                if predicted > 0.0 && actual > 0.0 && fc.is_finite() {
                    let ratio = actual / predicted;
                    if ratio > 0.75 {
                        radius = radius.max(3.0 * step.norm());
                    } else if ratio < 0.25 {
                        radius *= 0.5;
                    }
                    accepted = Some((candidate, fc));
                    break;
                }
                radius = 0.25 * radius.min(step.norm());
            }
            let Some((candidate, fc)) = accepted else {
                status = SolveStatus::Converged;
                break;
            };
            assert!(fc <= f, "accepted step increased the robust cost");
            let decrease = f - fc;
            x = candidate;
            if decrease <= cfg.relative_tolerance * f || fc <= f64::MIN_POSITIVE {
                f = fc;
                status = SolveStatus::Converged;
                break;
            }
            let lin = self.linearize(base, &x, dense)?;
            h = lin.0;
            g = lin.1;
            f = lin.2;
        }
        let mut values = base.clone();
        self.write_back(&mut values, x);
        Ok(SolveReport {
            values,
            status,
            iterations,
            initial_cost,
            final_cost: f,
        })
    }
}

fn dogleg(gn: &DVector<f64>, sd: &DVector<f64>, radius: f64) -> DVector<f64> {
    let gn_norm = gn.norm();
    if gn_norm <= radius {
        return gn.clone();
    }
    let sd_norm = sd.norm();
    if sd_norm >= radius {
        return sd * (radius / sd_norm);
    }
    let d = gn - sd;
    let a = d.norm_squared();
    let b = 2.0 * sd.dot(&d);
    let c = sd_norm * sd_norm - radius * radius;
    let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    sd + d * tau.clamp(0.0, 1.0)
}

/// `½ Σ ρ(‖r‖²)` over every factor, using each factor's own kernel.
pub fn robust_cost(graph: &FactorGraph, values: &Values) -> Result<f64, SolverError> {
    let mut total = 0.0;
    for f in graph.factors() {
        total += f.cost(values)?;
    }
    Ok(total)
}

/// Trust-region solve over every variable in the graph.
pub fn optimize_batch(graph: &FactorGraph, init: &Values, cfg: &SolverConfig) -> Result<SolveReport, SolverError> {
    let active: BTreeSet<VariableKey> = graph.variables().copied().collect();
    if active.is_empty() {
        return Ok(SolveReport {
            values: init.clone(),
            status: SolveStatus::Converged,
            iterations: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
        });
    }
    let sub = Subproblem::new(graph, init, &active, &|f| graph.factor(f).kernel())?;
    sub.run(init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{Factor, NoiseModel};
    use crate::manifold::Pose;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pk(i: u64) -> VariableKey {
        VariableKey::pose(0, i)
    }

    #[test]
    fn weighted_mean_of_two_priors() {
        let k = VariableKey::landmark(0);
        let mut g = FactorGraph::new();
        let n = NoiseModel::isotropic(1, 1.0).unwrap();
        g.add(Factor::prior_point(k, &[0.0], n.clone()).unwrap());
        g.add(Factor::prior_point(k, &[4.0], n).unwrap());
        let init: Values = [(k, Value::point(&[-7.0]))].into_iter().collect();
        let r = optimize_batch(&g, &init, &SolverConfig::default()).unwrap();
        assert!(r.converged());
        assert!((r.values.get(&k).unwrap().as_point().unwrap()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_gauge_rejected() {
        let mut g = FactorGraph::new();
        g.add(Factor::between(pk(0), pk(1), Pose::se2(1.0, 0.0, 0.0), NoiseModel::isotropic(3, 1.0).unwrap()).unwrap());
        let init: Values = [(pk(0), Value::Pose(Pose::identity(2))), (pk(1), Value::Pose(Pose::identity(2)))]
            .into_iter()
            .collect();
        assert_eq!(optimize_batch(&g, &init, &SolverConfig::default()).unwrap_err(), SolverError::Unconstrained);
        let missing: Values = [(pk(0), Value::Pose(Pose::identity(2)))].into_iter().collect();
        assert!(matches!(optimize_batch(&g, &missing, &SolverConfig::default()), Err(SolverError::MissingInit(_))));
    }

    #[test]
    fn exact_chain_dead_reckons() {
        let mut g = FactorGraph::new();
        let n = NoiseModel::isotropic(3, 0.1).unwrap();
        g.add(Factor::prior_pose(pk(0), Pose::identity(2), n.clone()).unwrap());
        let steps = [Pose::se2(1.0, 0.0, 0.3), Pose::se2(0.5, 0.2, -1.0), Pose::se2(2.0, -0.1, 1.4)];
        let mut truth = Pose::identity(2);
        let mut expect = vec![truth];
        let mut init = Values::new();
        init.insert(pk(0), Value::Pose(Pose::se2(0.3, -0.2, 0.1)));
        for (i, s) in steps.iter().enumerate() {
            g.add(Factor::between(pk(i as u64), pk(i as u64 + 1), *s, n.clone()).unwrap());
            truth = truth.compose(s);
            expect.push(truth);
            init.insert(pk(i as u64 + 1), Value::Pose(Pose::identity(2)));
        }
        let r = optimize_batch(&g, &init, &SolverConfig::default()).unwrap();
        assert!(r.final_cost < 1e-12, "{}", r.final_cost);
        for (i, e) in expect.iter().enumerate() {
            assert!(e.local(r.values.pose(&pk(i as u64)).unwrap()).unwrap().norm() < 1e-6);
        }
    }

    /// Independent Gauss-Newton on the full dense system, with its own
    /// finite-difference Jacobian of the stacked residual.
    fn gauss_newton_oracle(g: &FactorGraph, init: &Values) -> Values {
        let keys: Vec<VariableKey> = g.variables().copied().collect();
        let mut x = init.clone();
        for _ in 0..50 {
            let stack = |v: &Values| -> DVector<f64> {
                let parts: Vec<f64> = g.factors().iter().flat_map(|f| f.residual(v).unwrap().iter().copied().collect::<Vec<_>>()).collect();
                DVector::from_vec(parts)
            };
            let r0 = stack(&x);
            let n: usize = keys.iter().map(|k| x.get(k).unwrap().tangent_dim()).sum();
            let mut j = DMatrix::zeros(r0.len(), n);
            let mut col = 0;
            for k in &keys {
                let v = x.get(k).unwrap().clone();
                for c in 0..v.tangent_dim() {
                    let mut d = vec![0.0; v.tangent_dim()];
                    d[c] = 1e-7;
                    let mut xp = x.clone();
                    xp.insert(*k, v.retract(&d));
                    d[c] = -1e-7;
                    let mut xm = x.clone();
                    xm.insert(*k, v.retract(&d));
                    j.set_column(col, &((stack(&xp) - stack(&xm)) / 2e-7));
                    col += 1;
                }
            }
            let delta = (j.transpose() * &j).lu().solve(&(-(j.transpose() * &r0))).unwrap();
            let mut off = 0;
            for k in &keys {
                let v = x.get(k).unwrap().clone();
                let n = v.tangent_dim();
                x.insert(*k, v.retract(&delta.as_slice()[off..off + n]));
                off += n;
            }
            if delta.amax() < 1e-12 {
                break;
            }
        }
        x
    }

    #[test]
    fn triangle_matches_dense_oracle() {
        let mut g = FactorGraph::new();
        let n = NoiseModel::diagonal(&[0.05, 0.1, 0.1]).unwrap();
        g.add(Factor::prior_pose(pk(0), Pose::identity(2), n.clone()).unwrap());
        g.add(Factor::between(pk(0), pk(1), Pose::se2(1.0, 0.0, 2.0944), n.clone()).unwrap());
        g.add(Factor::between(pk(1), pk(2), Pose::se2(1.0, 0.0, 2.0944), n.clone()).unwrap());
        g.add(Factor::between(pk(2), pk(0), Pose::se2(1.1, 0.05, 2.0), n).unwrap());
        let init: Values = [
            (pk(0), Value::Pose(Pose::identity(2))),
            (pk(1), Value::Pose(Pose::se2(1.0, 0.0, 2.0))),
            (pk(2), Value::Pose(Pose::se2(0.5, 0.9, -2.0))),
        ]
        .into_iter()
        .collect();
        let r = optimize_batch(&g, &init, &SolverConfig {
            relative_tolerance: 1e-14,
            gradient_tolerance: 1e-12,
            ..Default::default()
        })
        .unwrap();
        let oracle = gauss_newton_oracle(&g, &init);
        for i in 0..3 {
            let d = oracle.pose(&pk(i)).unwrap().local(r.values.pose(&pk(i)).unwrap()).unwrap().norm();
            assert!(d < 1e-6, "pose {i}: {d}");
        }
    }

    fn noisy_loop(rng: &mut ChaCha8Rng, n_poses: u64) -> (FactorGraph, Values) {
        let mut g = FactorGraph::new();
        let n = NoiseModel::diagonal(&[0.02, 0.1, 0.1]).unwrap();
        g.add(Factor::prior_pose(pk(0), Pose::identity(2), NoiseModel::isotropic(3, 1e-3).unwrap()).unwrap());
        let mut init = Values::new();
        init.insert(pk(0), Value::Pose(Pose::identity(2)));
        let mut cur = Pose::identity(2);
        let step = Pose::se2(1.0, 0.0, 2.0 * std::f64::consts::PI / n_poses as f64);
        for i in 0..n_poses {
            let noisy = step.retract(&[rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
            let j = (i + 1) % n_poses;
            g.add(Factor::between(pk(i), pk(j), noisy, n.clone()).unwrap());
            if j != 0 {
                cur = cur.compose(&noisy);
                init.insert(pk(j), Value::Pose(cur));
            }
        }
        (g, init)
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, init) = noisy_loop(&mut rng, 60);
        let dense = optimize_batch(&g, &init, &SolverConfig { dense_limit: 10_000, ..Default::default() }).unwrap();
        let sparse = optimize_batch(&g, &init, &SolverConfig { dense_limit: 0, ..Default::default() }).unwrap();
        assert!(dense.converged() && sparse.converged());
        for k in g.variables() {
            let d = dense.values.get(k).unwrap().local_from(sparse.values.get(k).unwrap()).unwrap().norm();
            assert!(d < 1e-6, "{k}: {d}");
        }
        assert!(sparse.final_cost < sparse.initial_cost);
    }

    #[test]
    fn gradient_matches_cost_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut g, init) = noisy_loop(&mut rng, 8);
        let gm = Factor::between(pk(1), pk(5), Pose::se2(3.0, 1.0, 0.5), NoiseModel::isotropic(3, 0.3).unwrap())
            .unwrap()
            .with_kernel(RobustKernel::GemanMcClure { c: 3.0 });
        g.add(gm);
        let active: BTreeSet<VariableKey> = g.variables().copied().collect();
        let sub = Subproblem::new(&g, &init, &active, &|f| g.factor(f).kernel()).unwrap();
        let x = sub.initial(&init);
        let (_, grad, _) = sub.linearize(&init, &x, true).unwrap();
        let mut fd = DVector::zeros(grad.len());
        for i in 0..grad.len() {
            let mut d = DVector::zeros(grad.len());
            d[i] = 1e-6;
            let cp = sub.cost(&init, &sub.retract(&x, &d)).unwrap();
            d[i] = -1e-6;
            let cm = sub.cost(&init, &sub.retract(&x, &d)).unwrap();
            fd[i] = (cp - cm) / 2e-6;
        }
        assert!((&fd - &grad).norm() < 1e-4 * grad.norm().max(1.0), "{}", (&fd - &grad).norm() / grad.norm());
    }

    #[test]
    fn cost_never_increases_under_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let (mut g, init) = noisy_loop(&mut rng, 20);
            for _ in 0..4 {
                let a = rng.random_range(0..20);
                let b = (a + rng.random_range(2..18)) % 20;
                let f = Factor::between(pk(a), pk(b), Pose::se2(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-3.0..3.0)), NoiseModel::isotropic(3, 0.1).unwrap())
                    .unwrap()
                    .with_kernel(RobustKernel::GemanMcClure { c: 3.0 });
                g.add(f);
            }
            let r = optimize_batch(&g, &init, &SolverConfig::default()).unwrap();
            assert!(r.final_cost <= r.initial_cost);
            assert!((robust_cost(&g, &r.values).unwrap() - r.final_cost).abs() < 1e-9 * (1.0 + r.final_cost));
        }
    }
}

