use nalgebra::{DMatrix, DVector};
use sprs::{CsMat, FillInReduction, SymmetryCheck};
use sprs_ldl::Ldl;

/// Gauss-Newton normal equations `H δ = −g` in dense or sparse storage.
pub(crate) enum Hessian {
    Dense(DMatrix<f64>),
    Sparse(CsMat<f64>),
}

pub(crate) struct NormalBuilder {
    n: usize,
    dense: Option<DMatrix<f64>>,
    /// Per column, unsorted `(row, value)` contributions.
    cols: Option<Vec<Vec<(usize, f64)>>>,
    pub g: DVector<f64>,
}

impl NormalBuilder {
    pub fn new(n: usize, dense: bool) -> Self {
        NormalBuilder {
            n,
            dense: dense.then(|| DMatrix::zeros(n, n)),
            cols: (!dense).then(|| vec![Vec::new(); n]),
            g: DVector::zeros(n),
        }
    }

    /// Adds `block` at `(row, col)`; callers add the transpose block themselves.
    pub fn add_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) {
        if let Some(h) = self.dense.as_mut() {
            let mut view = h.view_mut((row, col), block.shape());
            view += block;
        } else if let Some(cols) = self.cols.as_mut() {
            for c in 0..block.ncols() {
                let entries = &mut cols[col + c];
                for r in 0..block.nrows() {
                    entries.push((row + r, block[(r, c)]));
                }
            }
        }
    }

    pub fn add_gradient(&mut self, row: usize, part: &DVector<f64>) {
        let mut view = self.g.rows_mut(row, part.len());
        view += part;
    }

    pub fn finish(self) -> (Hessian, DVector<f64>) {
        let h = match (self.dense, self.cols) {
            (Some(d), _) => Hessian::Dense(d),
            (None, Some(cols)) => Hessian::Sparse(compress(self.n, cols)),
            _ => unreachable!("builder has storage"),
        };
        debug_assert_eq!(self.g.len(), self.n);
        (h, self.g)
    }
}

/// Column lists to CSC, summing duplicates; every diagonal entry is stored.
fn compress(n: usize, cols: Vec<Vec<(usize, f64)>>) -> CsMat<f64> {
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0);
    for (c, mut entries) in cols.into_iter().enumerate() {
        entries.push((c, 0.0));
        entries.sort_unstable_by_key(|e| e.0);
        for (r, v) in entries {
            if indices.len() > *indptr.last().expect("nonempty") && indices.last() == Some(&r) {
                *data.last_mut().expect("nonempty") += v;
            } else {
                indices.push(r);
                data.push(v);
            }
        }
        indptr.push(indices.len());
    }
    CsMat::new_csc((n, n), indptr, indices, data)
}

impl Hessian {
    pub fn mul(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Hessian::Dense(h) => h * v,
            Hessian::Sparse(h) => {
                let mut out = DVector::zeros(v.len());
                for (val, (r, c)) in h.iter() {
                    out[r] += val * v[c];
                }
                out
            }
        }
    }

    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.mul(v))
    }

    fn diagonal(&self) -> DVector<f64> {
        match self {
            Hessian::Dense(h) => h.diagonal(),
            Hessian::Sparse(h) => {
                let mut d = DVector::zeros(h.rows());
                for (val, (r, c)) in h.iter() {
                    if r == c {
                        d[r] += val;
                    }
                }
                d
            }
        }
    }

    /// Solves `(H + damping·diag(H) + floor·I) x = rhs`; `None` if not positive definite.
    pub fn solve(&self, rhs: &DVector<f64>, damping: f64) -> Option<DVector<f64>> {
        let n = rhs.len();
        let shift = if damping > 0.0 {
            let d = self.diagonal();
            let floor = damping * d.amax().max(1e-12);
            Some(d.map(|x| damping * x + floor))
        } else {
            None
        };
        let x = match self {
            Hessian::Dense(h) => {
                let mut m = h.clone();
                if let Some(s) = &shift {
                    for i in 0..n {
                        m[(i, i)] += s[i];
                    }
                }
                m.cholesky()?.solve(rhs)
            }
            Hessian::Sparse(h) => {
                let mut m = h.clone();
                if let Some(s) = &shift {
                    for i in 0..n {
                        *m.get_mut(i, i).expect("diagonal is stored") += s[i];
                    }
                }
                let ldl = Ldl::new()
                    .check_symmetry(SymmetryCheck::DontCheckSymmetry)
                    .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
                    .numeric(m.view())
                    .ok()?;
                if ldl.d().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
                    return None;
                }
                let x: Vec<f64> = ldl.solve(rhs.as_slice());
                DVector::from_vec(x)
            }
        };
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
        a.transpose() * a + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn dense_and_sparse_agree() {
        let n = 9;
        let h = random_spd(n, 4);
        let rhs = DVector::from_fn(n, |i, _| i as f64 - 3.0);
        let mut dense = NormalBuilder::new(n, true);
        let mut sparse = NormalBuilder::new(n, false);
        // Insert in 3×3 blocks, mirroring how factors contribute.
        for bi in 0..3 {
            for bj in 0..3 {
                let blk = h.view((3 * bi, 3 * bj), (3, 3)).into_owned();
                dense.add_block(3 * bi, 3 * bj, &blk);
                sparse.add_block(3 * bi, 3 * bj, &blk);
            }
        }
        let (hd, _) = dense.finish();
        let (hs, _) = sparse.finish();
        let xd = hd.solve(&rhs, 0.0).unwrap();
        let xs = hs.solve(&rhs, 0.0).unwrap();
        let reference = h.clone().lu().solve(&rhs).unwrap();
        assert!((&xd - &reference).amax() < 1e-9);
        assert!((&xs - &reference).amax() < 1e-9);
        assert!((hs.mul(&rhs) - &h * &rhs).amax() < 1e-12);
    }

    #[test]
    fn singular_detected() {
        let n = 4;
        let mut b = NormalBuilder::new(n, false);
        let blk = DMatrix::from_element(2, 2, 1.0);
        b.add_block(0, 0, &blk);
        let (h, _) = b.finish();
        assert!(h.solve(&DVector::from_element(n, 1.0), 0.0).is_none());
        assert!(h.solve(&DVector::from_element(n, 1.0), 1e-6).is_some());
        let mut d = NormalBuilder::new(n, true);
        d.add_block(0, 0, &blk);
        let (h, _) = d.finish();
        assert!(h.solve(&DVector::from_element(n, 1.0), 0.0).is_none());
    }
}
