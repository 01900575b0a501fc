//! Synthetic data: Poisson counts on a square lattice with a jittered
//! intrinsic GMRF prior, and Gaussian-cluster multiclass data.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{BandCholesky, Ordering};
use crate::model::{gmrf_u_precision, GmrfParams};
use crate::sites::EXP_CAP;

/// Region graph with counts and the latent field that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeDataset {
    pub side: usize,
    pub edges: Vec<(usize, usize)>,
    pub counts: Vec<u64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatticeDataset {
    pub fn n_regions(&self) -> usize {
        self.counts.len()
    }
}

/// 4-neighbour edges of a `side × side` lattice, row-major node numbering.
pub fn lattice_edges(side: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            if c + 1 < side {
                edges.push((i, i + 1));
            }
            if r + 1 < side {
                edges.push((i, i + side));
            }
        }
    }
    edges
}

/// Samples `u` from the jittered intrinsic prior (then centred),
/// `v ~ N(0, 1/k_v)` and `yᵢ ~ Poisson(exp(offset + uᵢ + vᵢ))`.
pub fn synth_gmrf_dataset(side: usize, params: &GmrfParams, seed: u64) -> Result<LatticeDataset> {
    if side < 2 {
        return Err(Error::domain("grid side must be at least 2"));
    }
    let n = side * side;
    let edges = lattice_edges(side);
    let q = gmrf_u_precision(n, &edges, params.k_u, params.jitter())?;
    let mut adjacency = vec![Vec::new(); n];
    for &(a, b) in &edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let chol = BandCholesky::factor_sparse(&q, Ordering::reverse_cuthill_mckee(&adjacency))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut u = chol.apply_inverse_transpose(&z);
    let centre = u.mean();
    u.add_scalar_mut(-centre);
    let sd = params.k_v.recip().sqrt();
    let v: Vec<f64> = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let eta = params.offset + u[i] + v[i];
        if eta > EXP_CAP {
            return Err(Error::Overflow(eta));
        }
        let rate = eta.exp();
        let y = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::domain(format!("Poisson rate {rate}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        counts.push(y as u64);
    }
    Ok(LatticeDataset {
        side,
        edges,
        counts,
        u: u.iter().copied().collect(),
        v,
    })
}

/// Labelled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// `n` points from `classes` isotropic Gaussian clusters in `dim` dimensions
/// with centres drawn from `N(0, separation² I)`.
pub fn synth_multiclass(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<ClassificationData> {
    if classes < 2 || dim == 0 || n == 0 {
        return Err(Error::domain("need at least two classes, one feature and one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = Normal::new(0.0, separation).map_err(|e| Error::domain(e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| centre.sample(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        features.push(
            centres[k]
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        labels.push(k);
    }
    Ok(ClassificationData {
        features,
        labels,
        classes,
    })
}
