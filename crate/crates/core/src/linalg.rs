//! Sparse symmetric storage and a band Cholesky factorization under a
//! reverse Cuthill-McKee ordering.
//!
//! The band solver is the workhorse for sparse-precision priors: the
//! posterior precision of a lattice model has a pattern whose bandwidth after
//! RCM reordering grows with the lattice side, not with the number of nodes,
//! so factorization, solves and the selected inverse are all linear in the
//! dimension for a fixed side length.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Symmetric sparse matrix with both triangles stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct SymSparse {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SymSparse {
    /// Builds a symmetric matrix from `(i, j, value)` triplets. Off-diagonal
    /// triplets are mirrored, so each unordered pair should be given once.
    /// Repeated triplets accumulate.
    pub fn from_triplets(
        n: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::dim(format!("entry ({i}, {j}) outside a {n}x{n} matrix")));
            }
            *acc[i].entry(j).or_insert(0.0) += v;
            if i != j {
                *acc[j].entry(i).or_insert(0.0) += v;
            }
        }
        let rows = acc.into_iter().map(|r| r.into_iter().collect()).collect();
        Ok(SymSparse { n, rows })
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        SymSparse {
            n,
            rows: (0..n).map(|i| vec![(i, scale)]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n,
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(x))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Block-diagonal composition `blkdiag(self, other)`.
    pub fn block_diag(&self, other: &SymSparse) -> SymSparse {
        let off = self.n;
        let mut rows = self.rows.clone();
        rows.extend(
            other
                .rows
                .iter()
                .map(|r| r.iter().map(|&(j, v)| (j + off, v)).collect()),
        );
        SymSparse {
            n: self.n + other.n,
            rows,
        }
    }
}

/// Symmetric permutation plus the half-bandwidth it induces on a pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `iperm[old] = new`
    iperm: Vec<usize>,
    bandwidth: usize,
}

impl Ordering {
    /// Reverse Cuthill-McKee ordering of an undirected adjacency structure.
    /// Each connected component is started from a node of minimum degree.
    pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Ordering {
        let n = adjacency.len();
        let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut by_degree: Vec<usize> = (0..n).collect();
        by_degree.sort_by_key(|&i| (degree[i], i));
        for &start in &by_degree {
            if visited[start] {
                continue;
            }
            visited[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(node) = queue.pop_front() {
                order.push(node);
                let mut next: Vec<usize> = adjacency[node]
                    .iter()
                    .copied()
                    .filter(|&j| !visited[j])
                    .collect();
                next.sort_by_key(|&j| (degree[j], j));
                next.dedup();
                for j in next {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        order.reverse();
        Ordering::from_permutation(order, adjacency)
    }

    /// Wraps an explicit `new -> old` permutation and measures its bandwidth
    /// on `adjacency`.
    pub fn from_permutation(perm: Vec<usize>, adjacency: &[Vec<usize>]) -> Ordering {
        let mut iperm = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let bandwidth = adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
            .map(|(i, j)| iperm[i].abs_diff(iperm[j]))
            .max()
            .unwrap_or(0);
        Ordering {
            perm,
            iperm,
            bandwidth,
        }
    }

    pub fn identity(n: usize) -> Ordering {
        Ordering {
            perm: (0..n).collect(),
            iperm: (0..n).collect(),
            bandwidth: n.saturating_sub(1),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn new_index(&self, old: usize) -> usize {
        self.iperm[old]
    }

    pub fn old_index(&self, new: usize) -> usize {
        self.perm[new]
    }
}

/// Lower band of a symmetric matrix in permuted coordinates.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` at the symmetric position of permuted indices `(i, j)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            return Err(Error::Internal(format!(
                "entry ({i}, {j}) falls outside half-bandwidth {}",
                self.bw
            )));
        }
        let k = self.idx(i, j);
        self.data[k] += v;
        Ok(())
    }

    /// Loads a sparse symmetric matrix under `ordering`.
    pub fn from_sparse(a: &SymSparse, ordering: &Ordering) -> Result<Self> {
        let mut band = BandMatrix::zeros(a.n(), ordering.bandwidth());
        for i in 0..a.n() {
            let pi = ordering.new_index(i);
            for &(j, v) in a.row(i) {
                let pj = ordering.new_index(j);
                if pj <= pi {
                    band.add(pi, pj, v)?;
                }
            }
        }
        Ok(band)
    }
}

/// `P A Pᵀ = L Lᵀ` with `L` banded.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    ordering: Ordering,
    l: BandMatrix,
}

impl BandCholesky {
    pub fn factor(mut band: BandMatrix, ordering: Ordering) -> Result<Self> {
        let n = band.n;
        let bw = band.bw;
        if ordering.len() != n {
            return Err(Error::dim("ordering length differs from matrix size"));
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bw));
                let a_ij = band.data[band.idx(i, j)];
                let mut s = a_ij;
                let ri = band.idx(i, k0);
                let rj = band.idx(j, k0);
                for t in 0..(j - k0) {
                    s -= band.data[ri + t] * band.data[rj + t];
                }
                if i == j {
                    if !(s > 1e-14 * a_ij.abs()) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite(format!(
                            "pivot {} of {n} is {s:e}",
                            ordering.old_index(i)
                        )));
                    }
                    let k = band.idx(i, i);
                    band.data[k] = s.sqrt();
                } else {
                    let d = band.data[band.idx(j, j)];
                    let k = band.idx(i, j);
                    band.data[k] = s / d;
                }
            }
        }
        Ok(BandCholesky { ordering, l: band })
    }

    pub fn factor_sparse(a: &SymSparse, ordering: Ordering) -> Result<Self> {
        let band = BandMatrix::from_sparse(a, &ordering)?;
        Self::factor(band, ordering)
    }

    pub fn n(&self) -> usize {
        self.l.n
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.n()).map(|i| self.l.get(i, i).ln()).sum::<f64>()
    }

    /// Smallest diagonal entry of the factor.
    pub fn min_pivot(&self) -> f64 {
        (0..self.n())
            .map(|i| self.l.get(i, i))
            .fold(f64::INFINITY, f64::min)
    }

    fn forward(&self, y: &mut [f64]) {
        let bw = self.l.bw;
        for i in 0..self.n() {
            let lo = i.saturating_sub(bw);
            let base = self.l.idx(i, lo);
            let mut s = y[i];
            for (t, k) in (lo..i).enumerate() {
                s -= self.l.data[base + t] * y[k];
            }
            y[i] = s / self.l.data[self.l.idx(i, i)];
        }
    }

    fn backward(&self, y: &mut [f64]) {
        let n = self.n();
        let bw = self.l.bw;
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in (i + 1)..=hi {
                s -= self.l.data[self.l.idx(k, i)] * y[k];
            }
            y[i] = s / self.l.data[self.l.idx(i, i)];
        }
    }

    fn permute(&self, b: &DVector<f64>) -> Vec<f64> {
        (0..self.n()).map(|k| b[self.ordering.old_index(k)]).collect()
    }

    fn unpermute(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n(), (0..self.n()).map(|i| y[self.ordering.new_index(i)]))
    }

    /// Solves `A x = b` in original coordinates.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = self.permute(b);
        self.forward(&mut y);
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// Returns `Pᵀ L⁻ᵀ z`; for `z ~ N(0, I)` the result has covariance `A⁻¹`.
    pub fn apply_inverse_transpose(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut y: Vec<f64> = z.iter().copied().collect();
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// Squared norm of `L⁻¹ P b`, i.e. `bᵀ A⁻¹ b`.
    pub fn inverse_quad_form(&self, b: &DVector<f64>) -> f64 {
        let mut y = self.permute(b);
        self.forward(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// Reassembles `A` densely in original coordinates.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.n();
        let bw = self.l.bw;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let lo = i.saturating_sub(bw);
                let s: f64 = (lo..=j).map(|k| self.l.get(i, k) * self.l.get(j, k)).sum();
                let (oi, oj) = (self.ordering.old_index(i), self.ordering.old_index(j));
                a[(oi, oj)] = s;
                a[(oj, oi)] = s;
            }
        }
        a
    }

    /// Entries of `A⁻¹` on the band of the factor (Takahashi recurrence).
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.n();
        let bw = self.l.bw;
        let mut z = BandMatrix::zeros(n, bw);
        for i in (0..n).rev() {
            let hi = (i + bw).min(n.saturating_sub(1));
            let lii = self.l.get(i, i);
            for j in ((i + 1)..=hi).rev() {
                let s: f64 = ((i + 1)..=hi).map(|k| self.l.get(k, i) * z.get(k, j)).sum();
                let kk = z.idx(j, i);
                z.data[kk] = -s / lii;
            }
            let s: f64 = ((i + 1)..=hi).map(|k| self.l.get(k, i) * z.get(k, i)).sum();
            let kk = z.idx(i, i);
            z.data[kk] = (1.0 / lii - s) / lii;
        }
        SelectedInverse {
            ordering: self.ordering.clone(),
            z,
        }
    }
}

/// Band of `A⁻¹` in permuted storage, addressed by original indices.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    ordering: Ordering,
    z: BandMatrix,
}

impl SelectedInverse {
    /// `(A⁻¹)_{ij}` if the pair lies inside the band.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (pi, pj) = (self.ordering.new_index(i), self.ordering.new_index(j));
        (pi.abs_diff(pj) <= self.z.bw).then(|| self.z.get(pi, pj))
    }
}

/// Dense Cholesky returning the lower factor.
pub fn dense_cholesky(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(format!("{what} is {}x{}", a.nrows(), a.ncols())));
    }
    Cholesky::<f64, Dyn>::new(a.clone())
        .map(|c| c.unpack())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn lower_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(side: usize) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                if c + 1 < side {
                    e.push((i, i + 1));
                }
                if r + 1 < side {
                    e.push((i, i + side));
                }
            }
        }
        e
    }

    fn laplacian_plus(side: usize, shift: f64) -> SymSparse {
        let n = side * side;
        let edges = lattice(side);
        let mut deg = vec![0.0; n];
        let mut t = Vec::new();
        for &(i, j) in &edges {
            deg[i] += 1.0;
            deg[j] += 1.0;
            t.push((i, j, -1.0));
        }
        t.extend((0..n).map(|i| (i, i, deg[i] + shift)));
        SymSparse::from_triplets(n, t).unwrap()
    }

    fn adjacency(a: &SymSparse) -> Vec<Vec<usize>> {
        (0..a.n())
            .map(|i| a.row(i).iter().map(|&(j, _)| j).filter(|&j| j != i).collect())
            .collect()
    }

    #[test]
    fn rcm_keeps_lattice_bandwidth_near_side() {
        let a = laplacian_plus(12, 0.1);
        let ord = Ordering::reverse_cuthill_mckee(&adjacency(&a));
        assert!(ord.bandwidth() <= 13, "bandwidth {}", ord.bandwidth());
        let mut seen = ord.perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..144).collect::<Vec<_>>());
    }

    #[test]
    fn band_factor_matches_dense() {
        let a = laplacian_plus(6, 0.3);
        let ord = Ordering::reverse_cuthill_mckee(&adjacency(&a));
        let f = BandCholesky::factor_sparse(&a, ord).unwrap();
        let dense = a.to_dense();
        assert!((f.reconstruct() - &dense).amax() < 1e-12);

        let b = DVector::from_fn(36, |i, _| (i as f64 * 0.37).sin());
        let x = f.solve(&b);
        assert!((&dense * &x - &b).amax() < 1e-10);

        let chol = dense_cholesky(&dense, "test").unwrap();
        assert!((f.logdet() - lower_logdet(&chol)).abs() < 1e-10);
        assert!((f.inverse_quad_form(&b) - b.dot(&x)).abs() < 1e-10);
    }

    #[test]
    fn selected_inverse_matches_dense_inverse_on_band() {
        let a = laplacian_plus(5, 0.5);
        let ord = Ordering::reverse_cuthill_mckee(&adjacency(&a));
        let f = BandCholesky::factor_sparse(&a, ord).unwrap();
        let inv = a.to_dense().try_inverse().unwrap();
        let sel = f.selected_inverse();
        for i in 0..25 {
            for j in 0..25 {
                if let Some(v) = sel.get(i, j) {
                    assert!((v - inv[(i, j)]).abs() < 1e-12, "({i},{j})");
                }
            }
            assert!(sel.get(i, i).is_some());
        }
    }

    #[test]
    fn singular_laplacian_fails_to_factor() {
        let a = laplacian_plus(3, 0.0);
        let ord = Ordering::reverse_cuthill_mckee(&adjacency(&a));
        assert!(matches!(
            BandCholesky::factor_sparse(&a, ord),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn disconnected_components_are_all_ordered() {
        let a = SymSparse::from_triplets(4, [(0, 0, 1.0), (1, 1, 1.0), (2, 3, -0.5), (2, 2, 2.0), (3, 3, 2.0)])
            .unwrap();
        let ord = Ordering::reverse_cuthill_mckee(&adjacency(&a));
        assert_eq!(ord.len(), 4);
        let f = BandCholesky::factor_sparse(&a, ord).unwrap();
        assert!((f.reconstruct() - a.to_dense()).amax() < 1e-14);
    }
}
