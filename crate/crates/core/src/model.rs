//! Latent Gaussian models: prior `N(μ, Σ)`, linear predictor `η = Wz`, and
//! an ordered list of likelihood sites each claiming a block of rows of `W`.
//!
//! Two prior representations share one contract:
//!
//! * dense covariance blocks (Gaussian-process kernels), where the posterior
//!   precision `A(λ) = Σ⁻¹ + Wᵀ diag(λ) W` is factored in whitened
//!   coordinates, `A = L⁻ᵀ (I + Lᵀ Wᵀ Λ W L) L⁻¹` with `Σ = L Lᵀ`, so `Σ⁻¹` is
//!   never formed;
//! * a sparse precision matrix (Markov random fields), where `A(λ)` is
//!   assembled in band storage under a fixed reverse Cuthill-McKee ordering.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{dense_cholesky, lower_logdet, BandCholesky, BandMatrix, Ordering, SymSparse};
use crate::sites::Site;

/// Sparse row-major design matrix `W`, with an identity shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
    identity: bool,
}

impl Design {
    pub fn identity(n: usize) -> Self {
        Design {
            ncols: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
            identity: true,
        }
    }

    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if let Some(&(c, _)) = row.iter().find(|&&(c, _)| c >= ncols) {
                return Err(Error::dim(format!("design row {r} references column {c} of {ncols}")));
            }
        }
        Ok(Design {
            ncols,
            rows,
            identity: false,
        })
    }

    pub fn from_dense(w: &DMatrix<f64>) -> Self {
        let rows = (0..w.nrows())
            .map(|r| {
                (0..w.ncols())
                    .filter(|&c| w[(r, c)] != 0.0)
                    .map(|c| (c, w[(r, c)]))
                    .collect()
            })
            .collect();
        Design {
            ncols: w.ncols(),
            rows,
            identity: false,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    /// `W x`
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.identity {
            return x.clone();
        }
        DVector::from_iterator(
            self.nrows(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum::<f64>()),
        )
    }

    /// `Wᵀ y`
    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.identity {
            return y.clone();
        }
        let mut out = DVector::zeros(self.ncols);
        for (row, &yr) in self.rows.iter().zip(y.iter()) {
            for &(c, v) in row {
                out[c] += v * yr;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.nrows(), self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                w[(r, c)] += v;
            }
        }
        w
    }
}

/// Prior covariance, given densely, as independent dense blocks, or through
/// a sparse precision matrix.
#[derive(Debug, Clone)]
pub enum PriorCovariance {
    Dense(DMatrix<f64>),
    BlockDiagonal(Vec<DMatrix<f64>>),
    Precision(SymSparse),
}

impl PriorCovariance {
    pub fn dim(&self) -> usize {
        match self {
            PriorCovariance::Dense(m) => m.nrows(),
            PriorCovariance::BlockDiagonal(b) => b.iter().map(DMatrix::nrows).sum(),
            PriorCovariance::Precision(q) => q.n(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub covariance: PriorCovariance,
}

impl GaussianPrior {
    pub fn zero_mean(covariance: PriorCovariance) -> Self {
        GaussianPrior {
            mean: DVector::zeros(covariance.dim()),
            covariance,
        }
    }
}

#[derive(Debug)]
pub(crate) struct CovBlock {
    offset: usize,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    logdet: f64,
    /// Design rows whose support lies in this block.
    rows: Vec<usize>,
}

impl CovBlock {
    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.cov.nrows()
    }

    /// `Lᵀ w` restricted to the block, for a design row.
    fn whiten_row(&self, row: &[(usize, f64)], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let n = self.cov.nrows();
        for &(c, v) in row {
            let i = c - self.offset;
            for (j, o) in out.iter_mut().enumerate().take(i + 1).take(n) {
                *o += v * self.chol[(i, j)];
            }
        }
    }

    /// `Lᵀ W_bᵀ` for this block's rows, one column per row.
    fn whitened_rows(&self, design: &Design) -> DMatrix<f64> {
        let n = self.cov.nrows();
        let mut u = DMatrix::zeros(n, self.rows.len());
        let mut buf = vec![0.0; n];
        for (k, &r) in self.rows.iter().enumerate() {
            self.whiten_row(design.row(r), &mut buf);
            u.column_mut(k).copy_from_slice(&buf);
        }
        u
    }
}

#[derive(Debug)]
pub(crate) enum Structure {
    Dense { blocks: Vec<CovBlock> },
    Sparse { precision: SymSparse, chol: BandCholesky },
}

impl Structure {
    fn latent_dim(&self) -> usize {
        match self {
            Structure::Dense { blocks } => blocks.iter().map(|b| b.cov.nrows()).sum(),
            Structure::Sparse { precision, .. } => precision.n(),
        }
    }

    fn build(cov: PriorCovariance, design: &Design) -> Result<Structure> {
        match cov {
            PriorCovariance::Dense(m) => Self::dense(vec![m], design),
            PriorCovariance::BlockDiagonal(b) => Self::dense(b, design),
            PriorCovariance::Precision(q) => Self::sparse(q, design),
        }
    }

    fn dense(mut covs: Vec<DMatrix<f64>>, design: &Design) -> Result<Structure> {
        let offsets: Vec<usize> = covs
            .iter()
            .scan(0, |acc, m| {
                let o = *acc;
                *acc += m.nrows();
                Some(o)
            })
            .collect();
        let block_of = |c: usize| offsets.partition_point(|&o| o <= c) - 1;
        let mut assignment = Vec::with_capacity(design.nrows());
        let mut spans = false;
        for r in 0..design.nrows() {
            let row = design.row(r);
            let b = row.first().map_or(0, |&(c, _)| block_of(c));
            spans |= row.iter().any(|&(c, _)| block_of(c) != b);
            assignment.push(b);
        }
        if spans && covs.len() > 1 {
            let n: usize = covs.iter().map(DMatrix::nrows).sum();
            let mut full = DMatrix::zeros(n, n);
            for (m, &o) in covs.iter().zip(&offsets) {
                full.view_mut((o, o), (m.nrows(), m.ncols())).copy_from(m);
            }
            covs = vec![full];
            assignment.iter_mut().for_each(|b| *b = 0);
        }
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(covs.len());
        for cov in covs {
            if cov.nrows() != cov.ncols() {
                return Err(Error::dim("prior covariance block is not square"));
            }
            let scale = cov.amax().max(1.0);
            if (&cov - cov.transpose()).amax() > 1e-10 * scale {
                return Err(Error::domain("prior covariance is not symmetric"));
            }
            let chol = dense_cholesky(&cov, "prior covariance")?;
            let logdet = lower_logdet(&chol);
            let size = cov.nrows();
            blocks.push(CovBlock {
                offset,
                cov,
                chol,
                logdet,
                rows: Vec::new(),
            });
            offset += size;
        }
        for (r, b) in assignment.into_iter().enumerate() {
            blocks[b].rows.push(r);
        }
        Ok(Structure::Dense { blocks })
    }

    fn sparse(q: SymSparse, design: &Design) -> Result<Structure> {
        let n = q.n();
        let mut adjacency: Vec<Vec<usize>> = (0..n)
            .map(|i| q.row(i).iter().map(|&(j, _)| j).filter(|&j| j != i).collect())
            .collect();
        for r in 0..design.nrows() {
            let row = design.row(r);
            for &(a, _) in row {
                for &(b, _) in row {
                    if a != b {
                        adjacency[a].push(b);
                    }
                }
            }
        }
        for nb in adjacency.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        let ordering = Ordering::reverse_cuthill_mckee(&adjacency);
        let chol = BandCholesky::factor_sparse(&q, ordering)?;
        Ok(Structure::Sparse { precision: q, chol })
    }

    fn logdet_cov(&self) -> f64 {
        match self {
            Structure::Dense { blocks } => blocks.iter().map(|b| b.logdet).sum(),
            Structure::Sparse { chol, .. } => -chol.logdet(),
        }
    }

    fn cov_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Structure::Dense { blocks } => {
                let mut out = DVector::zeros(x.len());
                for b in blocks {
                    let r = b.range();
                    let xb = x.rows(r.start, r.len());
                    out.rows_mut(r.start, r.len()).copy_from(&(&b.cov * xb));
                }
                out
            }
            Structure::Sparse { chol, .. } => chol.solve(x),
        }
    }

    fn precision_quad(&self, x: &DVector<f64>) -> f64 {
        match self {
            Structure::Dense { blocks } => blocks
                .iter()
                .map(|b| {
                    let r = b.range();
                    let xb = x.rows(r.start, r.len()).into_owned();
                    b.chol
                        .solve_lower_triangular(&xb)
                        .map_or(f64::NAN, |z| z.norm_squared())
                })
                .sum(),
            Structure::Sparse { precision, .. } => precision.quad_form(x),
        }
    }

    fn precision_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Structure::Dense { blocks } => {
                let mut out = DVector::zeros(x.len());
                for b in blocks {
                    let r = b.range();
                    let xb = x.rows(r.start, r.len()).into_owned();
                    let z = b.chol.solve_lower_triangular(&xb).unwrap_or(xb);
                    let y = b.chol.tr_solve_lower_triangular(&z).unwrap_or(z);
                    out.rows_mut(r.start, r.len()).copy_from(&y);
                }
                out
            }
            Structure::Sparse { precision, .. } => precision.mul_vec(x),
        }
    }

    fn dense_cov(&self) -> DMatrix<f64> {
        match self {
            Structure::Dense { blocks } => {
                let n = self.latent_dim();
                let mut m = DMatrix::zeros(n, n);
                for b in blocks {
                    m.view_mut((b.offset, b.offset), b.cov.shape()).copy_from(&b.cov);
                }
                m
            }
            Structure::Sparse { chol, .. } => {
                let n = chol.n();
                DMatrix::from_columns(
                    &(0..n)
                        .map(|j| chol.solve(&DVector::from_fn(n, |i, _| f64::from(u8::from(i == j)))))
                        .collect::<Vec<_>>(),
                )
            }
        }
    }
}

/// A latent Gaussian model. Immutable; cheap to clone.
#[derive(Debug, Clone)]
pub struct LgmModel {
    mean: DVector<f64>,
    design: Design,
    sites: Vec<Site>,
    offsets: Vec<usize>,
    structure: Arc<Structure>,
}

impl LgmModel {
    pub fn new(prior: GaussianPrior, design: Design, sites: Vec<Site>) -> Result<Self> {
        let l = prior.covariance.dim();
        if l == 0 {
            return Err(Error::dim("latent dimension must be at least 1"));
        }
        if prior.mean.len() != l {
            return Err(Error::dim(format!("prior mean has length {}, covariance {l}", prior.mean.len())));
        }
        if design.ncols() != l {
            return Err(Error::dim(format!("design has {} columns, latent dimension is {l}", design.ncols())));
        }
        let mut offsets = Vec::with_capacity(sites.len() + 1);
        offsets.push(0);
        for site in &sites {
            site.validate()?;
            offsets.push(offsets.last().unwrap() + site.dim());
        }
        if *offsets.last().unwrap() != design.nrows() {
            return Err(Error::dim(format!(
                "sites claim {} rows but the design has {}",
                offsets.last().unwrap(),
                design.nrows()
            )));
        }
        let structure = Arc::new(Structure::build(prior.covariance, &design)?);
        Ok(LgmModel {
            mean: prior.mean,
            design,
            sites,
            offsets,
            structure,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site_rows(&self, site: usize) -> Range<usize> {
        self.offsets[site]..self.offsets[site + 1]
    }

    pub fn is_sparse(&self) -> bool {
        matches!(*self.structure, Structure::Sparse { .. })
    }

    /// Default interior dual point.
    pub fn initial_lambda(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.num_rows(),
            self.sites.iter().flat_map(Site::initial_lambda),
        )
    }

    pub fn logdet_prior_cov(&self) -> f64 {
        self.structure.logdet_cov()
    }

    /// `Σ x`
    pub fn prior_cov_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.structure.cov_mul(x)
    }

    /// `Σ⁻¹ x`
    pub fn prior_precision_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.structure.precision_mul(x)
    }

    /// `xᵀ Σ⁻¹ x`
    pub fn prior_precision_quad(&self, x: &DVector<f64>) -> f64 {
        self.structure.precision_quad(x)
    }

    /// Dense `Σ`. Intended for small models and diagnostics.
    pub fn dense_prior_cov(&self) -> DMatrix<f64> {
        self.structure.dense_cov()
    }

    /// Dense `Σ⁻¹`. Intended for small models.
    pub fn dense_prior_precision(&self) -> DMatrix<f64> {
        match &*self.structure {
            Structure::Sparse { precision, .. } => precision.to_dense(),
            Structure::Dense { .. } => {
                let n = self.latent_dim();
                DMatrix::from_columns(
                    &(0..n)
                        .map(|j| self.prior_precision_mul(&DVector::from_fn(n, |i, _| f64::from(u8::from(i == j)))))
                        .collect::<Vec<_>>(),
                )
            }
        }
    }

    /// Smallest pivot of the prior factorization (of `Σ` for dense priors, of
    /// `Σ⁻¹` for sparse ones).
    pub fn prior_min_pivot(&self) -> f64 {
        match &*self.structure {
            Structure::Dense { blocks } => blocks
                .iter()
                .flat_map(|b| b.chol.diagonal().iter().copied().collect::<Vec<_>>())
                .fold(f64::INFINITY, f64::min),
            Structure::Sparse { chol, .. } => chol.min_pivot(),
        }
    }

    /// Reconstruction residual of the prior factorization relative to the
    /// stored matrix, `‖LLᵀ − M‖_max / ‖M‖_max`.
    pub fn prior_factor_residual(&self) -> f64 {
        match &*self.structure {
            Structure::Dense { blocks } => blocks
                .iter()
                .map(|b| (&b.chol * b.chol.transpose() - &b.cov).amax() / b.cov.amax())
                .fold(0.0, f64::max),
            Structure::Sparse { precision, chol } => {
                let q = precision.to_dense();
                (chol.reconstruct() - &q).amax() / q.amax()
            }
        }
    }

    /// Sparse prior precision, if the model stores one.
    pub fn prior_precision(&self) -> Option<&SymSparse> {
        match &*self.structure {
            Structure::Sparse { precision, .. } => Some(precision),
            Structure::Dense { .. } => None,
        }
    }
}

/// Cached factorization of `A(λ) = Σ⁻¹ + Wᵀ diag(λ) W`.
#[derive(Debug, Clone)]
pub struct PrecisionFactor {
    structure: Arc<Structure>,
    rows: usize,
    kind: FactorKind,
}

#[derive(Debug, Clone)]
enum FactorKind {
    /// Per prior block, lower Cholesky factor of `I + Lᵀ Wᵀ Λ W L`.
    Whitened(Vec<DMatrix<f64>>),
    Band(BandCholesky),
}

/// Factorizes `A(λ)`. `λ` must be non-negative; every site domain lies in
/// the positive orthant.
pub fn assemble_a(model: &LgmModel, lambda: &DVector<f64>) -> Result<PrecisionFactor> {
    if lambda.len() != model.num_rows() {
        return Err(Error::dim(format!(
            "lambda has length {}, model has {} rows",
            lambda.len(),
            model.num_rows()
        )));
    }
    if let Some(i) = lambda.iter().position(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::domain(format!("lambda[{i}] = {} is not a finite non-negative value", lambda[i])));
    }
    let design = &model.design;
    let kind = match &*model.structure {
        Structure::Dense { blocks } => {
            let mut inner = Vec::with_capacity(blocks.len());
            for b in blocks {
                let n = b.cov.nrows();
                let mut g = DMatrix::zeros(b.rows.len(), n);
                let mut buf = vec![0.0; n];
                for (k, &r) in b.rows.iter().enumerate() {
                    let s = lambda[r].sqrt();
                    if s == 0.0 {
                        continue;
                    }
                    b.whiten_row(design.row(r), &mut buf);
                    for (j, v) in buf.iter().enumerate() {
                        g[(k, j)] = s * v;
                    }
                }
                let mut c = g.tr_mul(&g);
                for i in 0..n {
                    c[(i, i)] += 1.0;
                }
                inner.push(dense_cholesky(&c, "posterior precision")?);
            }
            FactorKind::Whitened(inner)
        }
        Structure::Sparse { precision, chol } => {
            let ordering = chol.ordering().clone();
            let mut band = BandMatrix::from_sparse(precision, &ordering)?;
            for r in 0..design.nrows() {
                let row = design.row(r);
                let l = lambda[r];
                for (a, &(ca, va)) in row.iter().enumerate() {
                    for &(cb, vb) in &row[a..] {
                        band.add(ordering.new_index(ca), ordering.new_index(cb), l * va * vb)?;
                    }
                }
            }
            FactorKind::Band(BandCholesky::factor(band, ordering)?)
        }
    };
    Ok(PrecisionFactor {
        structure: Arc::clone(&model.structure),
        rows: model.num_rows(),
        kind,
    })
}

impl PrecisionFactor {
    fn dense_parts(&self) -> Option<(&[CovBlock], &[DMatrix<f64>])> {
        match (&*self.structure, &self.kind) {
            (Structure::Dense { blocks }, FactorKind::Whitened(inner)) => Some((blocks, inner)),
            _ => None,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.structure.latent_dim()
    }

    /// `true` when the factor was built for `model`'s prior and design size.
    pub fn belongs_to(&self, model: &LgmModel) -> bool {
        Arc::ptr_eq(&self.structure, &model.structure) && self.rows == model.num_rows()
    }

    /// `log|A| + log|Σ| = log|I + Σ Wᵀ Λ W|`.
    pub fn logdet_ratio(&self) -> f64 {
        match &self.kind {
            FactorKind::Whitened(inner) => inner.iter().map(lower_logdet).sum(),
            FactorKind::Band(chol) => chol.logdet() - (-self.structure.logdet_cov()),
        }
    }

    /// `log|A(λ)|`
    pub fn logdet(&self) -> f64 {
        match &self.kind {
            FactorKind::Band(chol) => chol.logdet(),
            FactorKind::Whitened(_) => self.logdet_ratio() - self.structure.logdet_cov(),
        }
    }

    /// Smallest diagonal entry over the stored triangular factors.
    pub fn min_diagonal(&self) -> f64 {
        match &self.kind {
            FactorKind::Whitened(inner) => inner
                .iter()
                .flat_map(|r| r.diagonal().iter().copied().collect::<Vec<_>>())
                .fold(f64::INFINITY, f64::min),
            FactorKind::Band(chol) => chol.min_pivot(),
        }
    }

    /// Lower-triangular inner factors of the whitened form, one per prior
    /// block (dense priors only).
    pub fn whitened_factors(&self) -> Option<&[DMatrix<f64>]> {
        self.dense_parts().map(|(_, r)| r)
    }

    /// `A⁻¹ x`
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            FactorKind::Band(chol) => chol.solve(x),
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                let mut out = DVector::zeros(x.len());
                for (b, r) in blocks.iter().zip(inner) {
                    let range = b.range();
                    let y = b.chol.tr_mul(&x.rows(range.start, range.len()));
                    let z = r.solve_lower_triangular(&y).unwrap();
                    let u = r.tr_solve_lower_triangular(&z).unwrap();
                    out.rows_mut(range.start, range.len()).copy_from(&(&b.chol * u));
                }
                out
            }
        }
    }

    /// `wᵀ A⁻¹ w` for a sparse vector given as `(index, value)` pairs.
    pub fn inverse_quad(&self, w: &[(usize, f64)]) -> f64 {
        match &self.kind {
            FactorKind::Band(chol) => {
                let mut x = DVector::zeros(chol.n());
                for &(c, v) in w {
                    x[c] += v;
                }
                chol.inverse_quad_form(&x)
            }
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                let mut total = 0.0;
                for (b, r) in blocks.iter().zip(inner) {
                    let range = b.range();
                    let part: Vec<(usize, f64)> =
                        w.iter().copied().filter(|(c, _)| range.contains(c)).collect();
                    if part.is_empty() {
                        continue;
                    }
                    let mut buf = vec![0.0; range.len()];
                    b.whiten_row(&part, &mut buf);
                    let z = r.solve_lower_triangular(&DVector::from_vec(buf)).unwrap();
                    total += z.norm_squared();
                }
                total
            }
        }
    }

    /// `diag(W A⁻¹ Wᵀ)` via triangular solves (dense) or the selected
    /// inverse on the band (sparse).
    pub fn site_variances(&self, design: &Design) -> DVector<f64> {
        let mut out = DVector::zeros(design.nrows());
        match &self.kind {
            FactorKind::Band(chol) => {
                let z = chol.selected_inverse();
                for r in 0..design.nrows() {
                    let row = design.row(r);
                    let mut s = 0.0;
                    for &(a, va) in row {
                        for &(b, vb) in row {
                            s += va * vb * z.get(a, b).expect("design pair outside factor band");
                        }
                    }
                    out[r] = s;
                }
            }
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                for (b, r) in blocks.iter().zip(inner) {
                    if b.rows.is_empty() {
                        continue;
                    }
                    let u = b.whitened_rows(design);
                    let x = r.solve_lower_triangular(&u).unwrap();
                    for (k, &row) in b.rows.iter().enumerate() {
                        out[row] = x.column(k).norm_squared();
                    }
                }
            }
        }
        out
    }

    /// Full `W A⁻¹ Wᵀ`.
    pub fn projected_covariance(&self, design: &Design) -> DMatrix<f64> {
        let n = design.nrows();
        let mut p = DMatrix::zeros(n, n);
        match &self.kind {
            FactorKind::Band(chol) => {
                for r in 0..n {
                    let mut w = DVector::zeros(chol.n());
                    for &(c, v) in design.row(r) {
                        w[c] += v;
                    }
                    let x = chol.solve(&w);
                    for s in 0..n {
                        p[(s, r)] = design.row(s).iter().map(|&(c, v)| v * x[c]).sum();
                    }
                }
            }
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                for (b, r) in blocks.iter().zip(inner) {
                    if b.rows.is_empty() {
                        continue;
                    }
                    let x = r.solve_lower_triangular(&b.whitened_rows(design)).unwrap();
                    let pb = x.tr_mul(&x);
                    for (i, &ri) in b.rows.iter().enumerate() {
                        for (j, &rj) in b.rows.iter().enumerate() {
                            p[(ri, rj)] = pb[(i, j)];
                        }
                    }
                }
            }
        }
        p
    }

    /// `diag(A⁻¹)`, the posterior marginal variances of the latents.
    pub fn marginal_variances(&self) -> DVector<f64> {
        let n = self.latent_dim();
        match &self.kind {
            FactorKind::Band(chol) => {
                let z = chol.selected_inverse();
                DVector::from_iterator(n, (0..n).map(|i| z.get(i, i).unwrap()))
            }
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                let mut out = DVector::zeros(n);
                for (b, r) in blocks.iter().zip(inner) {
                    let x = r.solve_lower_triangular(&b.chol.transpose()).unwrap();
                    for k in 0..x.ncols() {
                        out[b.offset + k] = x.column(k).norm_squared();
                    }
                }
                out
            }
        }
    }

    /// Dense `A(λ)` reassembled from the factor.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.kind {
            FactorKind::Band(chol) => chol.reconstruct(),
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                let n = self.latent_dim();
                let mut a = DMatrix::zeros(n, n);
                for (b, r) in blocks.iter().zip(inner) {
                    let k = b.cov.nrows();
                    let linv = b.chol.solve_lower_triangular(&DMatrix::identity(k, k)).unwrap();
                    let c = r * r.transpose();
                    let ab = linv.transpose() * c * &linv;
                    a.view_mut((b.offset, b.offset), (k, k)).copy_from(&ab);
                }
                a
            }
        }
    }

    /// Moments of a latent `f` jointly Gaussian with `z` under the prior,
    /// given `c = Cov(z, f)`, `Var(f)` and the posterior mean offset
    /// `m − μ`: returns the posterior-predictive `(mean shift, variance)`.
    pub fn latent_predictive(
        &self,
        cross_cov: &DVector<f64>,
        prior_var: f64,
        mean_offset: &DVector<f64>,
    ) -> (f64, f64) {
        match &self.kind {
            FactorKind::Band(chol) => {
                let s = &self.structure;
                let a = s.precision_mul(cross_cov);
                let shift = a.dot(mean_offset);
                let var = prior_var - cross_cov.dot(&a) + a.dot(&chol.solve(&a));
                (shift, var)
            }
            FactorKind::Whitened(inner) => {
                let (blocks, _) = self.dense_parts().unwrap();
                let (mut shift, mut prior_term, mut post_term) = (0.0, 0.0, 0.0);
                for (b, r) in blocks.iter().zip(inner) {
                    let range = b.range();
                    let cb = cross_cov.rows(range.start, range.len()).into_owned();
                    if cb.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let w = b.chol.solve_lower_triangular(&cb).unwrap();
                    let mo = mean_offset.rows(range.start, range.len()).into_owned();
                    let wm = b.chol.solve_lower_triangular(&mo).unwrap();
                    shift += w.dot(&wm);
                    prior_term += w.norm_squared();
                    post_term += r.solve_lower_triangular(&w).unwrap().norm_squared();
                }
                (shift, prior_var - prior_term + post_term)
            }
        }
    }
}

/// Gaussian posterior `N(m, A(λ)⁻¹)` with its projections onto the sites.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: DVector<f64>,
    pub lambda: DVector<f64>,
    pub factor: PrecisionFactor,
    pub site_mean: DVector<f64>,
    pub site_var: DVector<f64>,
}

impl PosteriorGaussian {
    /// Posterior with covariance `A(λ)⁻¹` and an arbitrary mean.
    pub fn from_parts(model: &LgmModel, mean: DVector<f64>, lambda: DVector<f64>) -> Result<Self> {
        if mean.len() != model.latent_dim() {
            return Err(Error::dim("posterior mean length differs from latent dimension"));
        }
        let factor = assemble_a(model, &lambda)?;
        let site_mean = model.design.apply(&mean);
        let site_var = factor.site_variances(&model.design);
        Ok(PosteriorGaussian {
            mean,
            lambda,
            factor,
            site_mean,
            site_var,
        })
    }

    pub fn marginal_variances(&self) -> DVector<f64> {
        self.factor.marginal_variances()
    }
}

/// `(W m, diag(W A(λ)⁻¹ Wᵀ))` for a posterior of `model`.
pub fn project_site_moments(
    model: &LgmModel,
    posterior: &PosteriorGaussian,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !posterior.factor.belongs_to(model) || posterior.mean.len() != model.latent_dim() {
        return Err(Error::Internal(
            "posterior factor was not built for this model".to_string(),
        ));
    }
    Ok((
        model.design.apply(&posterior.mean),
        posterior.factor.site_variances(&model.design),
    ))
}

/// Named hyperparameters: `s`, `sigma`, `k_u`, `k_v`, `jitter`, `offset`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hyperparameters(BTreeMap<String, f64>);

impl Hyperparameters {
    pub const NAMES: [&'static str; 6] = ["s", "sigma", "k_u", "k_v", "jitter", "offset"];

    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        Self::check(name, value)?;
        self.0.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn get_or(&self, name: &str, default: f64) -> f64 {
        self.get(name).unwrap_or(default)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn check(name: &str, value: f64) -> Result<()> {
        if !Self::NAMES.contains(&name) {
            return Err(Error::domain(format!("unknown hyperparameter `{name}`")));
        }
        let ok = match name {
            "s" | "sigma" | "k_u" | "k_v" => value > 0.0 && value.is_finite(),
            "jitter" => value >= 0.0 && value.is_finite(),
            _ => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("hyperparameter {name} = {value} out of range")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.0.iter().try_for_each(|(k, &v)| Self::check(k, v))
    }
}

/// Squared-exponential kernel `σ² exp(−‖xᵢ − xⱼ‖² / (2s))` between two sets of
/// points.
pub fn se_cross_kernel(a: &[Vec<f64>], b: &[Vec<f64>], s: f64, sigma: f64) -> Result<DMatrix<f64>> {
    if !(s > 0.0) || !(sigma > 0.0) {
        return Err(Error::domain(format!("kernel needs s > 0 and sigma > 0 (got s={s}, sigma={sigma})")));
    }
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::dim("feature vectors have differing lengths"));
    }
    let s2 = sigma * sigma;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d2: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| (x - y) * (x - y)).sum();
        s2 * (-0.5 * d2 / s).exp()
    }))
}

pub fn se_kernel(inputs: &[Vec<f64>], s: f64, sigma: f64) -> Result<DMatrix<f64>> {
    let mut k = se_cross_kernel(inputs, inputs, s, sigma)?;
    for i in 0..inputs.len() {
        k[(i, i)] = sigma * sigma;
    }
    Ok(k)
}

/// Replicates `base_cov` along the diagonal `num_classes` times.
pub fn build_block_prior(base_cov: &DMatrix<f64>, num_classes: usize) -> Result<GaussianPrior> {
    if num_classes == 0 {
        return Err(Error::domain("number of blocks must be at least 1"));
    }
    dense_cholesky(base_cov, "block prior covariance")?;
    let covariance = if num_classes == 1 {
        PriorCovariance::Dense(base_cov.clone())
    } else {
        PriorCovariance::BlockDiagonal(vec![base_cov.clone(); num_classes])
    };
    Ok(GaussianPrior::zero_mean(covariance))
}

/// Prior hyperparameters of the spatial Poisson model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmrfParams {
    pub k_u: f64,
    pub k_v: f64,
    /// Ridge added to the intrinsic `u`-precision; `None` means `1e-6 · k_u`.
    pub jitter: Option<f64>,
    /// Log-rate offset `μ₀`.
    pub offset: f64,
}

impl GmrfParams {
    pub fn new(k_u: f64, k_v: f64) -> Self {
        GmrfParams {
            k_u,
            k_v,
            jitter: None,
            offset: 0.0,
        }
    }

    pub fn jitter(&self) -> f64 {
        self.jitter.unwrap_or(1e-6 * self.k_u)
    }

    fn validate(&self) -> Result<()> {
        if !(self.k_u > 0.0 && self.k_v > 0.0) {
            return Err(Error::domain("k_u and k_v must be positive"));
        }
        if !(self.jitter() >= 0.0) {
            return Err(Error::domain("jitter must be non-negative"));
        }
        Ok(())
    }
}

/// `k_u · (graph Laplacian) + jitter · I` over `n` regions.
pub fn gmrf_u_precision(n: usize, edges: &[(usize, usize)], k_u: f64, jitter: f64) -> Result<SymSparse> {
    let mut seen = std::collections::BTreeSet::new();
    let mut degree = vec![0.0; n];
    let mut triplets = Vec::new();
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::dim(format!("edge ({i}, {j}) references a region outside 0..{n}")));
        }
        if i == j {
            return Err(Error::domain(format!("self-loop at region {i}")));
        }
        if !seen.insert((i.min(j), i.max(j))) {
            continue;
        }
        degree[i] += 1.0;
        degree[j] += 1.0;
        triplets.push((i, j, -k_u));
    }
    triplets.extend((0..n).map(|i| (i, i, k_u * degree[i] + jitter)));
    SymSparse::from_triplets(n, triplets)
}

/// Spatial Poisson model with latent `z = [u; v]`, precision
/// `blkdiag(k_u·Lap + jitter·I, k_v·I)`, `η = u + v` and one Poisson site per
/// region.
pub fn build_gmrf_model(
    n_regions: usize,
    edges: &[(usize, usize)],
    params: &GmrfParams,
    counts: &[u64],
) -> Result<LgmModel> {
    let all: Vec<usize> = (0..n_regions).collect();
    build_gmrf_model_observed(n_regions, edges, params, counts, &all)
}

/// As [`build_gmrf_model`], with sites only for the `observed` regions.
pub fn build_gmrf_model_observed(
    n_regions: usize,
    edges: &[(usize, usize)],
    params: &GmrfParams,
    counts: &[u64],
    observed: &[usize],
) -> Result<LgmModel> {
    params.validate()?;
    if n_regions == 0 {
        return Err(Error::dim("at least one region is required"));
    }
    if counts.len() != n_regions {
        return Err(Error::dim(format!("{} counts for {n_regions} regions", counts.len())));
    }
    let qu = gmrf_u_precision(n_regions, edges, params.k_u, params.jitter())?;
    let q = qu.block_diag(&SymSparse::identity(n_regions, params.k_v));
    let mut mean = DVector::zeros(2 * n_regions);
    mean.rows_mut(n_regions, n_regions).fill(params.offset);
    let mut rows = Vec::with_capacity(observed.len());
    let mut sites = Vec::with_capacity(observed.len());
    for &i in observed {
        if i >= n_regions {
            return Err(Error::dim(format!("observed region {i} outside 0..{n_regions}")));
        }
        rows.push(vec![(i, 1.0), (n_regions + i, 1.0)]);
        sites.push(Site::poisson(counts[i]));
    }
    let design = Design::from_rows(2 * n_regions, rows)?;
    LgmModel::new(
        GaussianPrior {
            mean,
            covariance: PriorCovariance::Precision(q),
        },
        design,
        sites,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(cov: f64) -> LgmModel {
        LgmModel::new(
            GaussianPrior::zero_mean(PriorCovariance::Dense(DMatrix::from_element(1, 1, cov))),
            Design::identity(1),
            vec![Site::poisson(1)],
        )
        .unwrap()
    }

    #[test]
    fn se_kernel_entries() {
        let k = se_kernel(&[vec![0.3], vec![0.3]], 7.0, 2.0).unwrap();
        assert_eq!(k[(0, 1)], 4.0);
        let k = se_kernel(&[vec![0.0], vec![2f64.sqrt()]], 1.0, 1.0).unwrap();
        assert!((k[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        let k = se_kernel(&[vec![0.0], vec![5.0]], 1e12, 1.0).unwrap();
        assert!((k[(0, 1)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn se_kernel_errors() {
        assert!(matches!(se_kernel(&[vec![0.0], vec![1.0, 2.0]], 1.0, 1.0), Err(Error::Dimension(_))));
        assert!(matches!(se_kernel(&[vec![0.0]], 0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(se_kernel(&[vec![0.0]], 1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn block_prior_replicates() {
        let p = build_block_prior(&DMatrix::from_element(1, 1, 1.0), 3).unwrap();
        let m = LgmModel::new(p, Design::from_rows(3, vec![]).unwrap(), vec![]).unwrap();
        assert_eq!(m.dense_prior_cov(), DMatrix::identity(3, 3));

        let base = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = build_block_prior(&base, 2).unwrap();
        let m = LgmModel::new(p, Design::from_rows(4, vec![]).unwrap(), vec![]).unwrap();
        let full = m.dense_prior_cov();
        assert_eq!(full.view((0, 0), (2, 2)), base.view((0, 0), (2, 2)));
        assert_eq!(full.view((2, 2), (2, 2)), base.view((0, 0), (2, 2)));
        assert!(full.view((0, 2), (2, 2)).iter().all(|&v| v == 0.0));

        let single = build_block_prior(&base, 1).unwrap();
        assert!(matches!(single.covariance, PriorCovariance::Dense(ref m) if *m == base));
    }

    #[test]
    fn block_prior_rejects_indefinite_base() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(build_block_prior(&bad, 2), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn block_prior_logdet_is_additive() {
        let base = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let one = LgmModel::new(build_block_prior(&base, 1).unwrap(), Design::from_rows(2, vec![]).unwrap(), vec![]).unwrap();
        let four = LgmModel::new(build_block_prior(&base, 4).unwrap(), Design::from_rows(8, vec![]).unwrap(), vec![]).unwrap();
        assert!((four.logdet_prior_cov() - 4.0 * one.logdet_prior_cov()).abs() < 1e-12);
    }

    #[test]
    fn gmrf_two_node_chain_needs_jitter() {
        let mut p = GmrfParams::new(1.0, 2.0);
        p.jitter = Some(0.0);
        let qu = gmrf_u_precision(2, &[(0, 1)], 1.0, 0.0).unwrap();
        assert_eq!(qu.to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert!(matches!(
            build_gmrf_model(2, &[(0, 1)], &p, &[0, 0]),
            Err(Error::NotPositiveDefinite(_))
        ));
        p.jitter = Some(1e-6);
        let m = build_gmrf_model(2, &[(0, 1)], &p, &[0, 0]).unwrap();
        let pivot = m.prior_min_pivot();
        // second pivot of [[1+j, -1], [-1, 1+j]] is sqrt((1+j) - 1/(1+j)) ≈ sqrt(2j)
        let expect = ((1.0 + 1e-6) - 1.0 / (1.0 + 1e-6f64)).sqrt();
        assert!((pivot - expect).abs() < 1e-9, "{pivot}");
        assert!(pivot > 1e-4 && pivot < 1e-2);
    }

    #[test]
    fn gmrf_single_node_v_block() {
        let m = build_gmrf_model(1, &[], &GmrfParams::new(1.0, 2.0), &[3]).unwrap();
        let q = m.prior_precision().unwrap().to_dense();
        assert_eq!(q[(1, 1)], 2.0);
        assert_eq!(m.design().row(0), &[(0, 1.0), (1, 1.0)]);
    }

    #[test]
    fn assemble_identity_prior() {
        let m = LgmModel::new(
            GaussianPrior::zero_mean(PriorCovariance::Dense(DMatrix::identity(2, 2))),
            Design::identity(2),
            vec![Site::poisson(0), Site::poisson(0)],
        )
        .unwrap();
        let f = assemble_a(&m, &DVector::from_vec(vec![1.0, 3.0])).unwrap();
        let r = &f.whitened_factors().unwrap()[0];
        assert!((r[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
        assert!((r[(1, 1)] - 2.0).abs() < 1e-15);
        assert_eq!(r[(1, 0)], 0.0);
        assert!((f.to_dense() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]))).amax() < 1e-14);
        let f0 = assemble_a(&m, &DVector::zeros(2)).unwrap();
        assert!((f0.to_dense() - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn assemble_rejects_negative_lambda_and_bad_length() {
        let m = scalar_model(1.0);
        assert!(assemble_a(&m, &DVector::from_vec(vec![-0.1])).is_err());
        assert!(matches!(assemble_a(&m, &DVector::zeros(2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn site_moments_scalar() {
        let m = scalar_model(1.0);
        let post = PosteriorGaussian::from_parts(&m, DVector::zeros(1), DVector::from_vec(vec![1.0])).unwrap();
        let (mb, vb) = project_site_moments(&m, &post).unwrap();
        assert_eq!(mb[0], 0.0);
        assert!((vb[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stale_factor_is_rejected() {
        let a = scalar_model(1.0);
        let b = scalar_model(2.0);
        let post = PosteriorGaussian::from_parts(&a, DVector::zeros(1), DVector::from_vec(vec![1.0])).unwrap();
        assert!(matches!(project_site_moments(&b, &post), Err(Error::Internal(_))));
    }

    #[test]
    fn rows_spanning_blocks_merge_the_prior() {
        let base = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let prior = build_block_prior(&base, 2).unwrap();
        let w = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 1.0, 0.0]);
        let m = LgmModel::new(prior, Design::from_dense(&w), vec![Site::poisson(2)]).unwrap();
        let lam = DVector::from_vec(vec![0.7]);
        let f = assemble_a(&m, &lam).unwrap();
        let dense = m.dense_prior_cov().try_inverse().unwrap() + w.transpose() * 0.7 * &w;
        assert!((f.to_dense() - dense).amax() < 1e-12);
    }

    #[test]
    fn model_validation() {
        let p = || GaussianPrior::zero_mean(PriorCovariance::Dense(DMatrix::identity(2, 2)));
        assert!(LgmModel::new(p(), Design::identity(2), vec![Site::poisson(1)]).is_err());
        assert!(LgmModel::new(p(), Design::identity(3), vec![]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(LgmModel::new(
            GaussianPrior::zero_mean(PriorCovariance::Dense(asym)),
            Design::identity(2),
            vec![Site::poisson(0), Site::poisson(0)]
        )
        .is_err());
    }

    #[test]
    fn hyperparameter_ranges() {
        let mut h = Hyperparameters::new();
        assert!(h.set("s", 1.0).is_ok());
        assert!(h.set("sigma", 0.0).is_err());
        assert!(h.set("jitter", 0.0).is_ok());
        assert!(h.set("k_v", -1.0).is_err());
        assert!(h.set("bogus", 1.0).is_err());
        assert_eq!(h.get("s"), Some(1.0));
    }
}
