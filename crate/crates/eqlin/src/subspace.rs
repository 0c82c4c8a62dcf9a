//! Numerical subspace kernel: spans, orthogonal projectors, pseudo-inverses,
//! and the image/coimage pair (M, N) of a composed projector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::PredictorTable;

/// Rule deciding which singular values count toward numerical rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TolPolicy {
    /// σ counts iff σ > max(rows, cols) · σ_max · factor.
    Relative(f64),
    /// σ counts iff σ > the given value.
    Absolute(f64),
}

impl Default for TolPolicy {
    fn default() -> Self {
        TolPolicy::Relative(1e-12)
    }
}

impl TolPolicy {
    pub fn threshold(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match *self {
            TolPolicy::Relative(factor) => rows.max(cols) as f64 * sigma_max * factor,
            TolPolicy::Absolute(value) => value,
        }
    }

    /// The numeric knob of the policy, as reported in geometry summaries.
    pub fn value(&self) -> f64 {
        match *self {
            TolPolicy::Relative(v) | TolPolicy::Absolute(v) => v,
        }
    }
}

/// Thin SVD with singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub(crate) struct Decomposition {
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub(crate) fn decompose(a: &DMatrix<f64>) -> Decomposition {
    let (n, m) = a.shape();
    let p = n.min(m);
    if p == 0 {
        return Decomposition {
            u: DMatrix::zeros(n, 0),
            sigma: Vec::new(),
            v: DMatrix::zeros(m, 0),
        };
    }
    let svd = faer::Mat::<f64>::from_fn(n, m, |i, j| a[(i, j)])
        .thin_svd()
        .expect("SVD of a finite matrix converges");
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let su = DMatrix::from_fn(n, p, |i, c| u[(i, order[c])]);
    let sv = DMatrix::from_fn(m, p, |i, c| v[(i, order[c])]);
    let sigma = order.iter().map(|&c| s[c]).collect();
    Decomposition { u: su, sigma, v: sv }
}

/// Singular values of `a` in decreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    decompose(a).sigma
}

/// Top `count` right-singular vectors of `data` as columns, sign-normalized; zero columns pad a short spectrum.
pub fn principal_axes(data: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let dec = decompose(data);
    let mut axes = DMatrix::zeros(data.ncols(), count);
    for c in 0..count.min(dec.v.ncols()) {
        axes.set_column(c, &dec.v.column(c));
    }
    orient(axes)
}

/// Spectral (operator 2-) norm.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

fn rank_of(dec: &Decomposition, shape: (usize, usize), policy: TolPolicy, scale_floor: f64) -> (usize, f64) {
    let smax = dec.sigma.first().copied().unwrap_or(0.0).max(scale_floor);
    let thr = policy.threshold(shape.0, shape.1, smax);
    (dec.sigma.iter().filter(|&&s| s > thr).count(), thr)
}

/// Numerical rank under `policy`.
pub fn rank(a: &DMatrix<f64>, policy: TolPolicy) -> usize {
    rank_with_floor(a, policy, 0.0)
}

pub(crate) fn rank_with_floor(a: &DMatrix<f64>, policy: TolPolicy, scale_floor: f64) -> usize {
    rank_of(&decompose(a), a.shape(), policy, scale_floor).0
}

/// Moore–Penrose pseudo-inverse with singular values at or below the policy threshold dropped.
pub fn pseudo_inverse(a: &DMatrix<f64>, policy: TolPolicy) -> DMatrix<f64> {
    pseudo_inverse_with_floor(a, policy, 0.0)
}

/// Pseudo-inverse whose rank threshold uses `max(σ_max, scale_floor)` as the scale.
///
/// Products of projectors have nominal scale 1 even when every singular value is noise.
pub(crate) fn pseudo_inverse_with_floor(a: &DMatrix<f64>, policy: TolPolicy, scale_floor: f64) -> DMatrix<f64> {
    let dec = decompose(a);
    let (r, _) = rank_of(&dec, a.shape(), policy, scale_floor);
    let (n, m) = a.shape();
    let mut out = DMatrix::zeros(m, n);
    for i in 0..r {
        out += dec.v.column(i) * dec.u.column(i).transpose() / dec.sigma[i];
    }
    out
}

fn orient(mut basis: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in basis.column_iter_mut() {
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-10) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    basis
}

/// A linear subspace of R^d stored by an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    ambient: usize,
    basis: DMatrix<f64>,
    tol: f64,
}

impl Subspace {
    pub fn zero(ambient: usize) -> Self {
        Subspace { ambient, basis: DMatrix::zeros(ambient, 0), tol: 0.0 }
    }

    pub fn full(ambient: usize) -> Self {
        Subspace { ambient, basis: DMatrix::identity(ambient, ambient), tol: 0.0 }
    }

    /// Wraps columns that are already orthonormal, normalizing their orientation.
    pub fn from_orthonormal(basis: DMatrix<f64>, tol: f64) -> Self {
        Subspace { ambient: basis.nrows(), basis: orient(basis), tol }
    }

    /// Numerical row space of an n×d matrix.
    pub fn span_of_rows(rows: &DMatrix<f64>, policy: TolPolicy) -> Self {
        Self::span_of_rows_with_floor(rows, policy, 0.0)
    }

    /// Numerical column space of a d×n matrix.
    pub fn span_of_columns(cols: &DMatrix<f64>, policy: TolPolicy) -> Self {
        Self::span_of_rows_with_floor(&cols.transpose(), policy, 0.0)
    }

    pub(crate) fn span_of_rows_with_floor(rows: &DMatrix<f64>, policy: TolPolicy, scale_floor: f64) -> Self {
        let dec = decompose(rows);
        let (r, thr) = rank_of(&dec, rows.shape(), policy, scale_floor);
        Subspace::from_orthonormal(dec.v.columns(0, r).into_owned(), thr)
    }

    pub(crate) fn span_of_columns_with_floor(cols: &DMatrix<f64>, policy: TolPolicy, scale_floor: f64) -> Self {
        Self::span_of_rows_with_floor(&cols.transpose(), policy, scale_floor)
    }

    pub fn ambient(&self) -> usize {
        self.ambient
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthonormal basis as the columns of a d×r matrix.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Singular-value threshold used when the basis was extracted.
    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    pub fn complement(&self) -> Subspace {
        let residual = DMatrix::identity(self.ambient, self.ambient) - self.projector();
        Subspace::span_of_columns_with_floor(&residual, TolPolicy::default(), 1.0)
    }

    /// ‖P_self · P_other − P_other‖: zero iff `other ⊆ self`.
    pub fn containment_residual(&self, other: &Subspace) -> f64 {
        let po = other.projector();
        op_norm(&(self.projector() * &po - po))
    }

    pub fn contains(&self, other: &Subspace, tol: f64) -> bool {
        self.containment_residual(other) <= tol
    }

    /// ‖P_self − P_other‖ in operator norm.
    pub fn distance(&self, other: &Subspace) -> f64 {
        op_norm(&(self.projector() - other.projector()))
    }

    pub fn equals(&self, other: &Subspace, tol: f64) -> bool {
        self.dim() == other.dim() && self.distance(other) <= tol
    }

    /// span(self ∪ other).
    pub fn sum(&self, other: &Subspace) -> Subspace {
        let mut cols = DMatrix::zeros(self.ambient, self.dim() + other.dim());
        cols.columns_mut(0, self.dim()).copy_from(&self.basis);
        cols.columns_mut(self.dim(), other.dim()).copy_from(&other.basis);
        Subspace::span_of_columns_with_floor(&cols, TolPolicy::default(), 1.0)
    }

    /// self ∩ other, as the joint null space of the two complementary projectors.
    pub fn intersection(&self, other: &Subspace) -> Subspace {
        let id = DMatrix::identity(self.ambient, self.ambient);
        let stacked = stack_rows(&[&(&id - self.projector()), &(&id - other.projector())]);
        null_space(&stacked, TolPolicy::default())
    }
}

/// Vertical concatenation of matrices with equal column counts.
pub(crate) fn stack_rows(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Null space of a matrix whose rows have nominal scale 1 and whose row count is at least its column count.
fn null_space(stacked: &DMatrix<f64>, policy: TolPolicy) -> Subspace {
    let d = stacked.ncols();
    debug_assert!(stacked.nrows() >= d);
    let dec = decompose(stacked);
    let (r, thr) = rank_of(&dec, stacked.shape(), policy, 1.0);
    Subspace::from_orthonormal(dec.v.columns(r, d - r).into_owned(), thr)
}

/// F ∩ G⊥ as the null space of [basis(G)ᵀ; I − P_F].
pub fn intersect_with_orthogonal_complement(f: &Subspace, g: &Subspace, policy: TolPolicy) -> Subspace {
    let d = f.ambient();
    let outside_f = DMatrix::identity(d, d) - f.projector();
    let stacked = stack_rows(&[&g.basis().transpose(), &outside_f]);
    null_space(&stacked, policy)
}

/// M = Im(P_F P_G) and N = ker(P_F P_G)⊥, read off one SVD of the product.
pub fn mn_spaces(f: &Subspace, g: &Subspace, policy: TolPolicy) -> (Subspace, Subspace) {
    assert_eq!(f.ambient(), g.ambient(), "subspaces live in different ambient spaces");
    let product = f.projector() * g.projector();
    let dec = decompose(&product);
    let (r, thr) = rank_of(&dec, product.shape(), policy, 1.0);
    (
        Subspace::from_orthonormal(dec.u.columns(0, r).into_owned(), thr),
        Subspace::from_orthonormal(dec.v.columns(0, r).into_owned(), thr),
    )
}

/// The spaces F, G, M, N of a table together with its effective complexity.
#[derive(Debug, Clone)]
pub struct EffectiveGeometry {
    pub f: Subspace,
    pub g: Subspace,
    pub m: Subspace,
    pub n: Subspace,
    pub k: usize,
    /// dim(F ∩ G⊥), computed independently of M.
    pub f_cap_g_perp: usize,
    /// All embeddings numerically zero.
    pub degenerate: bool,
    pub policy: TolPolicy,
}

impl EffectiveGeometry {
    pub fn ambient(&self) -> usize {
        self.f.ambient()
    }

    pub fn diverse(&self) -> bool {
        self.f.dim() == self.ambient() && self.g.dim() == self.ambient()
    }

    /// dim(M) = dim(F) − dim(F ∩ G⊥).
    pub fn dimension_formula_holds(&self) -> bool {
        self.f.dim() == self.k + self.f_cap_g_perp && self.n.dim() == self.k
    }

    pub fn report(&self) -> GeometryReport {
        GeometryReport {
            dim_f: self.f.dim(),
            dim_g: self.g.dim(),
            k: self.k,
            diverse: self.diverse(),
            tol: self.policy.value(),
        }
    }
}

/// Serializable summary of an [`EffectiveGeometry`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    #[serde(rename = "dimF")]
    pub dim_f: usize,
    #[serde(rename = "dimG")]
    pub dim_g: usize,
    pub k: usize,
    pub diverse: bool,
    pub tol: f64,
}

pub fn effective_geometry(table: &PredictorTable, policy: TolPolicy) -> EffectiveGeometry {
    let f = Subspace::span_of_rows(table.embeddings(), policy);
    let g = Subspace::span_of_rows(table.pivot_differences().rows(), policy);
    let (m, n) = mn_spaces(&f, &g, policy);
    let f_cap_g_perp = intersect_with_orthogonal_complement(&f, &g, policy).dim();
    EffectiveGeometry {
        k: m.dim(),
        degenerate: f.dim() == 0,
        f,
        g,
        m,
        n,
        f_cap_g_perp,
        policy,
    }
}

/// dim(F) = dim(G) = d.
pub fn diversity_check(table: &PredictorTable) -> bool {
    let policy = TolPolicy::default();
    let d = table.dim();
    rank(table.embeddings(), policy) == d && rank(table.pivot_differences().rows(), policy) == d
}
