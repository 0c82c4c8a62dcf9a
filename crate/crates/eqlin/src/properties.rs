//! Linear properties of a single model (parallelism, relational linearity,
//! subspace witnesses, probes, steering, paraphrases, tautologies) and their
//! transfer along an extended-linear certificate.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::equivalence::ElCertificate;
use crate::model::{softmax, ModelError, PredictorTable};
use crate::subspace::{effective_geometry, pseudo_inverse, EffectiveGeometry, Subspace, TolPolicy};

/// Operator-norm tolerance for subspace containment tests.
pub const SUBSPACE_TOL: f64 = 1e-8;

/// Relative size below which a projection or β counts as zero.
pub const ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PropError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing concatenated sequences: {}", .0.join(", "))]
    MissingSequences(Vec<String>),
    #[error("unknown {what} {name:?}")]
    Unknown { what: &'static str, name: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("membership violated: {what} (residual {residual:.3e})")]
    Membership { what: String, residual: f64 },
    #[error("probe condition violated for pairs: {}", format_pairs(.0))]
    ProbeCondition(Vec<(String, String, f64)>),
    #[error("internal consistency failure: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn format_pairs(pairs: &[(String, String, f64)]) -> String {
    pairs.iter().map(|(a, b, r)| format!("({a}, {b}): {r:.3e}")).collect::<Vec<_>>().join("; ")
}

fn token(table: &PredictorTable, name: &str) -> Result<usize, PropError> {
    table.token_index(name).ok_or_else(|| PropError::Unknown { what: "token", name: name.to_string() })
}

/// Resolves token names to indices.
pub fn tokens(table: &PredictorTable, names: &[&str]) -> Result<Vec<usize>, PropError> {
    names.iter().map(|n| token(table, n)).collect()
}

/// Index pairs (s, s⌢q) for every sampled s whose extension by `query` is also sampled.
pub fn query_pairs(table: &PredictorTable, query: &str) -> Vec<(usize, usize)> {
    table
        .sequences()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| table.sequence_index(&format!("{s}{query}")).map(|j| (i, j)))
        .collect()
}

/// Index pairs (s, s⌢q) for the given contexts, listing every missing row.
pub fn query_pairs_for(table: &PredictorTable, query: &str, contexts: &[String]) -> Result<Vec<(usize, usize)>, PropError> {
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for c in contexts {
        let joined = format!("{c}{query}");
        match (table.sequence_index(c), table.sequence_index(&joined)) {
            (Some(i), Some(j)) => pairs.push((i, j)),
            (None, _) => missing.push(c.clone()),
            (_, None) => missing.push(joined),
        }
    }
    if missing.is_empty() {
        Ok(pairs)
    } else {
        Err(PropError::MissingSequences(missing))
    }
}

fn default_pairs(table: &PredictorTable, query: &str) -> Result<Vec<(usize, usize)>, PropError> {
    let pairs = query_pairs(table, query);
    if pairs.is_empty() {
        return Err(PropError::Precondition(format!("no sampled sequence s has s⌢{query} in the sample")));
    }
    Ok(pairs)
}

fn check_ambient(space: &Subspace, len: usize) -> Result<(), PropError> {
    if space.ambient() != len {
        return Err(PropError::Dimension(format!("vector of length {len} in R^{}", space.ambient())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelStatus {
    Parallel,
    NotParallel,
    /// One of the projections vanishes, which is the excluded β = 0 case.
    ZeroProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParallelismResult {
    /// Least-squares β with P_Γγ ≈ β P_Γγ′; absent when a projection vanishes.
    pub beta: Option<f64>,
    /// ‖P_Γγ − β P_Γγ′‖ / ‖P_Γγ‖.
    pub residual: f64,
    pub parallel: bool,
    pub status: ParallelStatus,
}

/// Whether P_Γγ = β P_Γγ′ for some β ≠ 0.
pub fn parallel_in(gamma: &DVector<f64>, gamma_prime: &DVector<f64>, space: &Subspace, tol: f64) -> Result<ParallelismResult, PropError> {
    check_ambient(space, gamma.len())?;
    check_ambient(space, gamma_prime.len())?;
    let a = space.project(gamma);
    let b = space.project(gamma_prime);
    let scale = 1f64.max(gamma.norm()).max(gamma_prime.norm());
    if a.norm() <= ZERO_TOL * scale || b.norm() <= ZERO_TOL * scale {
        return Ok(ParallelismResult { beta: None, residual: f64::NAN, parallel: false, status: ParallelStatus::ZeroProjection });
    }
    let beta = a.dot(&b) / b.norm_squared();
    let residual = (&a - &b * beta).norm() / a.norm();
    let parallel = residual <= tol;
    let status = if parallel { ParallelStatus::Parallel } else { ParallelStatus::NotParallel };
    Ok(ParallelismResult { beta: Some(beta), residual, parallel, status })
}

/// Both routes of the log-ratio parallelism test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRatioParallelism {
    /// g(y1) − g(y0) against g(y3) − g(y2) inside N.
    pub geometric: ParallelismResult,
    /// β fitted to log p(y0|s)/p(y1|s) ≈ β log p(y2|s)/p(y3|s).
    pub ratio_beta: Option<f64>,
    /// max |r01 − β r23| / max |r01|.
    pub ratio_residual: f64,
    pub proportional: bool,
    /// Agreed β when both routes report parallelism.
    pub beta: Option<f64>,
}

pub fn logratio_parallelism_check(
    table: &PredictorTable,
    quad: [usize; 4],
    tol: f64,
) -> Result<LogRatioParallelism, PropError> {
    let [y0, y1, y2, y3] = quad;
    let k = table.num_tokens();
    if let Some(&bad) = quad.iter().find(|&&y| y >= k) {
        return Err(PropError::Unknown { what: "token index", name: bad.to_string() });
    }
    if y0 == y1 || y2 == y3 {
        return Err(PropError::Precondition("each ratio needs two distinct tokens".into()));
    }
    let geo = effective_geometry(table, TolPolicy::default());
    let gamma = table.unembedding(y1) - table.unembedding(y0);
    let gamma_prime = table.unembedding(y3) - table.unembedding(y2);
    let geometric = parallel_in(&gamma, &gamma_prime, &geo.n, tol)?;

    let mut r01 = Vec::with_capacity(table.num_sequences());
    let mut r23 = Vec::with_capacity(table.num_sequences());
    for i in 0..table.num_sequences() {
        let lp = table.log_conditional(i)?;
        r01.push(lp[y0] - lp[y1]);
        r23.push(lp[y2] - lp[y3]);
    }
    let max01 = r01.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max23 = r23.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = 1f64.max(max01).max(max23);
    let (ratio_beta, ratio_residual, proportional) = if max01 <= ZERO_TOL * scale || max23 <= ZERO_TOL * scale {
        (None, f64::NAN, false)
    } else {
        let beta = r01.iter().zip(&r23).map(|(a, b)| a * b).sum::<f64>() / r23.iter().map(|b| b * b).sum::<f64>();
        let worst = r01.iter().zip(&r23).fold(0.0f64, |m, (a, b)| m.max((a - beta * b).abs()));
        let residual = worst / max01;
        (Some(beta), residual, residual <= tol && beta.abs() > ZERO_TOL)
    };

    if geometric.parallel != proportional {
        return Err(PropError::Inconsistent(format!(
            "geometric route says parallel={} (residual {:.3e}), log-ratio route says {} (residual {:.3e})",
            geometric.parallel, geometric.residual, proportional, ratio_residual
        )));
    }
    let beta = match (geometric.parallel, geometric.beta, ratio_beta) {
        (true, Some(bg), Some(br)) => {
            if (bg - br).abs() > tol * 1f64.max(bg.abs()) {
                return Err(PropError::Inconsistent(format!("β differs between routes: {bg} vs {br}")));
            }
            Some(bg)
        }
        _ => None,
    };
    Ok(LogRatioParallelism { geometric, ratio_beta, ratio_residual, proportional, beta })
}

/// Affine fit P_Γ f(s⌢q) ≈ P_Γ(A f(s) + a) over the sampled contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRepFit {
    pub query: String,
    pub gamma: Subspace,
    /// (s, s⌢q) sequence index pairs used in the fit.
    pub pairs: Vec<(usize, usize)>,
    /// Minimum-norm A_q (columns inside Γ).
    pub a_map: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// Γ_q = Im(A_qᵀ P_Γ).
    pub gamma_q: Subspace,
    pub residual: f64,
    pub threshold: f64,
    pub valid: bool,
    /// The centered context embeddings do not span R^d.
    pub rank_deficient: bool,
}

impl LinearRepFit {
    fn residual_on(&self, table: &PredictorTable) -> (f64, f64) {
        let p = self.gamma.projector();
        let mut worst = 0.0f64;
        let mut scale = 1.0f64;
        for &(s, sq) in &self.pairs {
            let target = &p * table.embedding(sq);
            let predicted = &p * (&self.a_map * table.embedding(s) + &self.offset);
            worst = worst.max((&target - predicted).norm());
            scale = scale.max(target.norm());
        }
        (worst, scale)
    }
}

/// Result of a relational-linearity scan.
#[derive(Debug, Clone, PartialEq)]
pub enum RelationalLinearity {
    Fitted(Box<LinearRepFit>),
    /// Γ is orthogonal to N, so P_Γ f vanishes and the property holds vacuously.
    Trivial { gamma_dim: usize, overlap_with_n: f64 },
}

impl RelationalLinearity {
    pub fn fit(&self) -> Option<&LinearRepFit> {
        match self {
            RelationalLinearity::Fitted(fit) => Some(fit),
            RelationalLinearity::Trivial { .. } => None,
        }
    }

    pub fn into_fit(self) -> Option<LinearRepFit> {
        match self {
            RelationalLinearity::Fitted(fit) => Some(*fit),
            RelationalLinearity::Trivial { .. } => None,
        }
    }
}

/// Least-squares test of relational linearity of `query` on Γ.
///
/// `contexts` defaults to every sampled s whose extension s⌢q is also sampled.
pub fn fit_relational_linearity(
    table: &PredictorTable,
    query: &str,
    gamma: &Subspace,
    contexts: Option<&[String]>,
    tol: f64,
) -> Result<RelationalLinearity, PropError> {
    let d = table.dim();
    check_ambient(gamma, d)?;
    let geo = effective_geometry(table, TolPolicy::default());
    let outside = geo.g.containment_residual(gamma);
    if outside > SUBSPACE_TOL {
        return Err(PropError::Membership { what: "Γ ⊄ span(g0)".into(), residual: outside });
    }
    let pairs = match contexts {
        Some(c) => query_pairs_for(table, query, c)?,
        None => default_pairs(table, query)?,
    };
    let overlap = crate::subspace::op_norm(&(geo.n.projector() * gamma.projector()));
    if overlap <= SUBSPACE_TOL {
        return Ok(RelationalLinearity::Trivial { gamma_dim: gamma.dim(), overlap_with_n: overlap });
    }
    Ok(RelationalLinearity::Fitted(Box::new(fit_pairs(table, query, gamma, pairs, tol))))
}

fn fit_pairs(table: &PredictorTable, query: &str, gamma: &Subspace, pairs: Vec<(usize, usize)>, tol: f64) -> LinearRepFit {
    let d = table.dim();
    let n = pairs.len();
    let p = gamma.projector();
    let x = DMatrix::from_fn(n, d, |r, c| table.embeddings()[(pairs[r].0, c)]);
    let y = DMatrix::from_fn(n, d, |r, c| table.embeddings()[(pairs[r].1, c)]) * &p;
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x.clone();
    let mut yc = y.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let policy = TolPolicy::default();
    let a_map = (pseudo_inverse(&xc, policy) * yc).transpose();
    let offset = y_mean.transpose() - &a_map * x_mean.transpose();
    let gamma_q = Subspace::span_of_columns_with_floor(&(a_map.transpose() * &p), policy, 1.0);
    let mut fit = LinearRepFit {
        query: query.to_string(),
        gamma: gamma.clone(),
        rank_deficient: crate::subspace::rank(&xc, policy) < d,
        pairs,
        a_map,
        offset,
        gamma_q,
        residual: 0.0,
        threshold: 0.0,
        valid: false,
    };
    let (residual, scale) = fit.residual_on(table);
    fit.residual = residual;
    fit.threshold = tol * scale;
    fit.valid = residual <= fit.threshold;
    fit
}

/// γ with (g(y_j) − g(y_i))ᵀ f(s) = γᵀ(f(s⌢q) − a_q) on every context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsWitness {
    pub gamma: Vec<f64>,
    pub identity_gap: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub fn ls_witness(fit: &LinearRepFit, table: &PredictorTable, yi: usize, yj: usize, tol: f64) -> Result<LsWitness, PropError> {
    let diff = table.unembedding(yj) - table.unembedding(yi);
    let membership = (&diff - fit.gamma_q.project(&diff)).norm() / 1f64.max(diff.norm());
    if membership > tol {
        return Err(PropError::Membership { what: "g(y_j) − g(y_i) ∉ Γ_q".into(), residual: membership });
    }
    let geo = effective_geometry(table, TolPolicy::default());
    let outside = geo.g.containment_residual(&fit.gamma_q);
    if outside > SUBSPACE_TOL {
        return Err(PropError::Membership { what: "Γ_q ⊄ span(g0)".into(), residual: outside });
    }
    let map = fit.a_map.transpose() * fit.gamma.projector();
    let gamma = pseudo_inverse(&map, TolPolicy::default()) * &diff;
    let mut gap = 0.0f64;
    let mut scale = 1.0f64;
    for &(s, sq) in &fit.pairs {
        let lhs = diff.dot(&table.embedding(s));
        let rhs = gamma.dot(&(table.embedding(sq) - &fit.offset));
        gap = gap.max((lhs - rhs).abs());
        scale = scale.max(lhs.abs());
    }
    let threshold = tol * scale;
    Ok(LsWitness { gamma: gamma.iter().copied().collect(), identity_gap: gap, threshold, passed: gap <= threshold })
}

/// Linear probe softmax(W f(s) + b) over a token subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeParams {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub tokens: Vec<usize>,
}

impl ProbeParams {
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let cols = self.w.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.w.len(), cols, |i, j| self.w[i][j])
    }

    pub fn predict(&self, embedding: &DVector<f64>) -> DVector<f64> {
        softmax(&(self.w_matrix() * embedding + DVector::from_column_slice(&self.b)))
    }
}

/// W row i = A_qᵀ g(y_i), b_i = a_qᵀ g(y_i).
pub fn probe_params(fit: &LinearRepFit, table: &PredictorTable, probed: &[usize], tol: f64) -> Result<ProbeParams, PropError> {
    if probed.len() < 2 {
        return Err(PropError::Precondition(format!("probe needs at least two tokens, got {}", probed.len())));
    }
    if let Some(&bad) = probed.iter().find(|&&y| y >= table.num_tokens()) {
        return Err(PropError::Unknown { what: "token index", name: bad.to_string() });
    }
    let mut violations = Vec::new();
    for (n, &i) in probed.iter().enumerate() {
        for &j in &probed[n + 1..] {
            let diff = table.unembedding(i) - table.unembedding(j);
            let outside = (&diff - fit.gamma.project(&diff)).norm() / 1f64.max(diff.norm());
            if outside > tol {
                violations.push((table.tokens()[i].clone(), table.tokens()[j].clone(), outside));
            }
        }
    }
    if !violations.is_empty() {
        return Err(PropError::ProbeCondition(violations));
    }
    let w = probed.iter().map(|&y| (fit.a_map.transpose() * table.unembedding(y)).iter().copied().collect()).collect();
    let b = probed.iter().map(|&y| fit.offset.dot(&table.unembedding(y))).collect();
    Ok(ProbeParams { w, b, tokens: probed.to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub max_gap: f64,
    pub passed: bool,
}

/// Compares the probe with p(y | s⌢q; Y_P) on every context.
pub fn check_probe(table: &PredictorTable, query: &str, probe: &ProbeParams, tol: f64) -> Result<ProbeReport, PropError> {
    let pairs = default_pairs(table, query)?;
    let mut gap = 0.0f64;
    for (s, sq) in pairs {
        let logits = table.logits(sq)?;
        let restricted = softmax(&DVector::from_iterator(probe.tokens.len(), probe.tokens.iter().map(|&y| logits[y])));
        let predicted = probe.predict(&table.embedding(s));
        gap = gap.max((restricted - predicted).abs().max());
    }
    Ok(ProbeReport { max_gap: gap, passed: gap <= tol })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Steering {
    Found {
        v: DVector<f64>,
        /// ‖P_Γ0 A_q0 v‖.
        effect: f64,
        /// max_j ‖P_Γj A_qj v‖.
        leak: f64,
    },
    /// Γ_q0 is covered by the other queries' subspaces.
    Absent { dim_gamma_q0: usize, dim_overlap: usize },
}

/// Direction that moves the reply to q0 while leaving q1..qm untouched.
///
/// v is the dominant right-singular vector of P_{Γ_q0}(I − P_U), U = span(∪ Γ_qj); it lies in U⊥.
pub fn steering_vector(fit0: &LinearRepFit, others: &[LinearRepFit]) -> Result<Steering, PropError> {
    if let Some(bad) = std::iter::once(fit0).chain(others).find(|f| !f.valid) {
        return Err(PropError::Precondition(format!("fit for query {:?} is not valid", bad.query)));
    }
    let d = fit0.gamma_q.ambient();
    let union = others.iter().fold(Subspace::zero(d), |acc, f| acc.sum(&f.gamma_q));
    let overlap = union.intersection(&fit0.gamma_q).dim();
    if overlap >= fit0.gamma_q.dim() {
        return Ok(Steering::Absent { dim_gamma_q0: fit0.gamma_q.dim(), dim_overlap: overlap });
    }
    let restricted = fit0.gamma_q.projector() * (DMatrix::identity(d, d) - union.projector());
    let top = Subspace::span_of_rows_with_floor(&restricted, TolPolicy::default(), 1.0);
    let dominant = crate::subspace::decompose(&restricted).v.column(0).into_owned();
    let v = Subspace::from_orthonormal(DMatrix::from_column_slice(d, 1, dominant.as_slice()), top.tol()).basis().column(0).into_owned();
    let effect = (fit0.gamma.projector() * &fit0.a_map * &v).norm();
    let leak = others.iter().map(|f| (f.gamma.projector() * &f.a_map * &v).norm()).fold(0.0, f64::max);
    Ok(Steering::Found { v, effect, leak })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisReport {
    /// ‖P_N P_Γ − P_Γ‖.
    pub gamma_in_n: f64,
    /// ‖P_M P_Γq − P_Γq‖.
    pub gamma_q_in_m: f64,
    pub tol: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub hypotheses: HypothesisReport,
    /// Transferred fit evaluated on model B (meaningful as a guarantee only when the hypotheses hold).
    pub fit: LinearRepFit,
    /// ‖P_Ñ P_Γ̃ − P_Γ̃‖.
    pub gamma_tilde_in_n: f64,
}

/// Carries a relational-linearity fit on A to B through a certificate A → B.
pub fn transfer_linearity(
    fit: &LinearRepFit,
    cert: &ElCertificate,
    a: &PredictorTable,
    b: &PredictorTable,
    tol: f64,
) -> Result<TransferOutcome, PropError> {
    if cert.m.shape() != (a.dim(), b.dim()) || cert.n.shape() != (a.dim(), b.dim()) {
        return Err(PropError::Dimension("certificate does not map between these models".into()));
    }
    let policy = TolPolicy::default();
    let ga = effective_geometry(a, policy);
    let gb = effective_geometry(b, policy);
    let gamma_in_n = ga.n.containment_residual(&fit.gamma);
    let gamma_q_in_m = ga.m.containment_residual(&fit.gamma_q);
    let hypotheses = HypothesisReport {
        gamma_in_n,
        gamma_q_in_m,
        tol: SUBSPACE_TOL,
        holds: gamma_in_n <= SUBSPACE_TOL && gamma_q_in_m <= SUBSPACE_TOL,
    };
    let p = fit.gamma.projector();
    let gamma_tilde = Subspace::span_of_columns_with_floor(&(pseudo_inverse(&cert.n, policy) * &p), policy, 1.0);
    let h = &p * pseudo_inverse(&cert.n.transpose(), policy);
    let h_inv = pseudo_inverse(&h, policy);
    let a_map = &h_inv * &p * &fit.a_map * &cert.m;
    let offset = &h_inv * &p * &fit.offset;
    let gamma_q = Subspace::span_of_columns_with_floor(&(a_map.transpose() * gamma_tilde.projector()), policy, 1.0);
    let mut moved = LinearRepFit {
        query: fit.query.clone(),
        gamma: gamma_tilde,
        pairs: fit.pairs.clone(),
        a_map,
        offset,
        gamma_q,
        residual: 0.0,
        threshold: 0.0,
        valid: false,
        rank_deficient: fit.rank_deficient,
    };
    let (residual, scale) = moved.residual_on(b);
    moved.residual = residual;
    moved.threshold = tol * scale;
    moved.valid = residual <= moved.threshold;
    let gamma_tilde_in_n = gb.n.containment_residual(&moved.gamma);
    Ok(TransferOutcome { hypotheses, fit: moved, gamma_tilde_in_n })
}

/// Parallelism of the same vector pair in A (inside N) and of its image in B (inside Ñ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParallelTransfer {
    pub in_a: ParallelismResult,
    pub in_b: ParallelismResult,
    pub beta_gap: Option<f64>,
    pub agree: bool,
}

/// γ̃ = N⁺ P_N γ.
pub fn corresponding_vector(cert: &ElCertificate, geo_a: &EffectiveGeometry, gamma: &DVector<f64>) -> DVector<f64> {
    pseudo_inverse(&cert.n, TolPolicy::default()) * geo_a.n.project(gamma)
}

pub fn transfer_parallelism(
    gamma: &DVector<f64>,
    gamma_prime: &DVector<f64>,
    cert: &ElCertificate,
    a: &PredictorTable,
    b: &PredictorTable,
    tol: f64,
) -> Result<ParallelTransfer, PropError> {
    let ga = effective_geometry(a, TolPolicy::default());
    let gb = effective_geometry(b, TolPolicy::default());
    check_ambient(&ga.g, gamma.len())?;
    check_ambient(&ga.g, gamma_prime.len())?;
    for v in [gamma, gamma_prime] {
        let outside = (v - ga.g.project(v)).norm() / 1f64.max(v.norm());
        if outside > SUBSPACE_TOL {
            return Err(PropError::Membership { what: "vector ∉ span(g0)".into(), residual: outside });
        }
    }
    let in_a = parallel_in(gamma, gamma_prime, &ga.n, tol)?;
    let in_b = parallel_in(
        &corresponding_vector(cert, &ga, gamma),
        &corresponding_vector(cert, &ga, gamma_prime),
        &gb.n,
        tol,
    )?;
    Ok(pair_agreement(in_a, in_b, tol))
}

fn pair_agreement(in_a: ParallelismResult, in_b: ParallelismResult, tol: f64) -> ParallelTransfer {
    let beta_gap = match (in_a.parallel, in_b.parallel, in_a.beta, in_b.beta) {
        (true, true, Some(x), Some(y)) => Some((x - y).abs()),
        _ => None,
    };
    let agree = in_a.parallel == in_b.parallel && beta_gap.is_none_or(|g| g <= tol * 1f64.max(in_a.beta.unwrap_or(0.0).abs()));
    ParallelTransfer { in_a, in_b, beta_gap, agree }
}

/// Parallelism of two vectors in the full space and inside N of the same model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParallelViews {
    pub full: ParallelismResult,
    pub in_n: ParallelismResult,
}

pub fn parallel_views(table: &PredictorTable, gamma: &DVector<f64>, gamma_prime: &DVector<f64>, tol: f64) -> Result<ParallelViews, PropError> {
    let geo = effective_geometry(table, TolPolicy::default());
    Ok(ParallelViews {
        full: parallel_in(gamma, gamma_prime, &Subspace::full(table.dim()), tol)?,
        in_n: parallel_in(gamma, gamma_prime, &geo.n, tol)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParaphraseOutcome {
    pub beta: Option<f64>,
    /// max |r1 − β r2| / max |r1| over contexts and answer pairs.
    pub residual: f64,
    /// Range of per-pair β estimates.
    pub spread: f64,
    pub dim_gamma1: usize,
    pub dim_gamma2: usize,
    /// O = (G1)⁺ G2 with G_i the pivot-difference rows of the answer sets.
    pub omat: Option<DMatrix<f64>>,
    /// max ‖P_Γ1 f(s⌢q1) − β O P_Γ2 f(s⌢q2)‖.
    pub identity_residual: Option<f64>,
    pub paraphrase: bool,
}

/// Tests whether `q1` paraphrases `q2` with answers `y1[i]` ↔ `y2[i]`.
pub fn paraphrase_check(
    table: &PredictorTable,
    q1: &str,
    y1: &[usize],
    q2: &str,
    y2: &[usize],
    tol: f64,
) -> Result<ParaphraseOutcome, PropError> {
    if y1.len() != y2.len() || y1.len() < 2 {
        return Err(PropError::Precondition(format!("answer sets must pair up with at least two tokens ({} vs {})", y1.len(), y2.len())));
    }
    if let Some(&bad) = y1.iter().chain(y2).find(|&&y| y >= table.num_tokens()) {
        return Err(PropError::Unknown { what: "token index", name: bad.to_string() });
    }
    let first = default_pairs(table, q1)?;
    let contexts: Vec<String> = first.iter().map(|&(s, _)| table.sequences()[s].clone()).collect();
    let second = query_pairs_for(table, q2, &contexts)?;

    let m = y1.len();
    let mut r1 = vec![Vec::new(); m - 1];
    let mut r2 = vec![Vec::new(); m - 1];
    for (&(_, s1), &(_, s2)) in first.iter().zip(&second) {
        let l1 = table.log_conditional(s1)?;
        let l2 = table.log_conditional(s2)?;
        for i in 1..m {
            r1[i - 1].push(l1[y1[i]] - l1[y1[0]]);
            r2[i - 1].push(l2[y2[i]] - l2[y2[0]]);
        }
    }
    let flat1: Vec<f64> = r1.concat();
    let flat2: Vec<f64> = r2.concat();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let max1 = flat1.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let max2 = flat2.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let scale = 1f64.max(max1).max(max2);

    let per_pair: Vec<f64> = r1
        .iter()
        .zip(&r2)
        .filter(|(_, b)| b.iter().any(|x| x.abs() > ZERO_TOL * scale))
        .map(|(a, b)| dot(a, b) / dot(b, b))
        .collect();
    let spread = match per_pair.iter().copied().reduce(f64::max) {
        Some(hi) => hi - per_pair.iter().copied().fold(f64::INFINITY, f64::min),
        None => f64::NAN,
    };

    let diffs = |ys: &[usize]| DMatrix::from_fn(m - 1, table.dim(), |i, j| table.unembeddings()[(ys[i + 1], j)] - table.unembeddings()[(ys[0], j)]);
    let (g1, g2) = (diffs(y1), diffs(y2));
    let policy = TolPolicy::default();
    let gamma1 = Subspace::span_of_rows(&g1, policy);
    let gamma2 = Subspace::span_of_rows(&g2, policy);
    let mut outcome = ParaphraseOutcome {
        beta: None,
        residual: f64::NAN,
        spread,
        dim_gamma1: gamma1.dim(),
        dim_gamma2: gamma2.dim(),
        omat: None,
        identity_residual: None,
        paraphrase: false,
    };
    if max1 <= ZERO_TOL * scale || max2 <= ZERO_TOL * scale {
        return Ok(outcome);
    }
    let beta = dot(&flat1, &flat2) / dot(&flat2, &flat2);
    let worst = flat1.iter().zip(&flat2).fold(0.0f64, |acc, (a, b)| acc.max((a - beta * b).abs()));
    outcome.residual = worst / max1;
    outcome.beta = Some(beta);
    if outcome.residual > tol || beta.abs() <= ZERO_TOL {
        return Ok(outcome);
    }
    let omat = pseudo_inverse(&g1, policy) * &g2;
    let (p1, p2) = (gamma1.projector(), gamma2.projector());
    let mut identity = 0.0f64;
    let mut emb_scale = 1.0f64;
    for (&(_, s1), &(_, s2)) in first.iter().zip(&second) {
        let lhs = &p1 * table.embedding(s1);
        let rhs = &omat * (&p2 * table.embedding(s2)) * beta;
        identity = identity.max((&lhs - rhs).norm());
        emb_scale = emb_scale.max(lhs.norm());
    }
    outcome.paraphrase = gamma1.dim() == gamma2.dim() && identity <= tol * emb_scale;
    outcome.identity_residual = Some(identity);
    outcome.omat = Some(omat);
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TautologyOutcome {
    pub tautology: bool,
    /// max over s, y of |log p(y|s⌢q) − log p(y|q)|.
    pub max_gap: f64,
    pub threshold: f64,
    /// f(q) when the query is a tautology.
    pub a_q: Option<DVector<f64>>,
    /// max ‖P_G f(s⌢q) − P_G f(q)‖.
    pub projection_residual: f64,
}

pub fn tautology_check(table: &PredictorTable, query: &str, tol: f64) -> Result<TautologyOutcome, PropError> {
    let bare = table.sequence_index(query).ok_or_else(|| PropError::MissingSequences(vec![query.to_string()]))?;
    let pairs = default_pairs(table, query)?;
    let reference = table.log_conditional(bare)?;
    let p_g = effective_geometry(table, TolPolicy::default()).g.projector();
    let anchor = &p_g * table.embedding(bare);
    let mut gap = 0.0f64;
    let mut scale = 1f64.max(reference.abs().max());
    let mut projection_residual = 0.0f64;
    for &(_, sq) in &pairs {
        let lp = table.log_conditional(sq)?;
        gap = gap.max((&lp - &reference).abs().max());
        scale = scale.max(lp.abs().max());
        projection_residual = projection_residual.max((&p_g * table.embedding(sq) - &anchor).norm());
    }
    let threshold = tol * scale;
    let tautology = gap <= threshold;
    Ok(TautologyOutcome {
        tautology,
        max_gap: gap,
        threshold,
        a_q: tautology.then(|| table.embedding(bare)),
        projection_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PropertyKind {
    #[serde(rename = "GLR")]
    Glr,
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "LP")]
    Lp,
    #[serde(rename = "STEER")]
    Steer,
    #[serde(rename = "PARA")]
    Para,
    #[serde(rename = "TAUT")]
    Taut,
    #[serde(rename = "PARALLEL")]
    Parallel,
}

/// Machine-readable property verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub property: PropertyKind,
    pub verdict: bool,
    pub residual: f64,
    pub params: Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivalence::{generate_equivalent, Distortion, EquivOptions, GeneratorOptions};
    use crate::synth::{random_model, Planted, SynthSpec};
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn axes(d: usize, idx: &[usize]) -> Subspace {
        let cols: Vec<DVector<f64>> = idx
            .iter()
            .map(|&i| {
                let mut v = DVector::zeros(d);
                v[i] = 1.0;
                v
            })
            .collect();
        Subspace::span_of_columns(&DMatrix::from_columns(&cols), TolPolicy::default())
    }

    #[test]
    fn parallel_in_full_space() {
        let r = parallel_in(&dvector![1.0, 1.0, 0.0], &dvector![2.0, 2.0, 0.0], &Subspace::full(3), 1e-10).unwrap();
        assert!(r.parallel);
        assert!((r.beta.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parallel_ignores_outside_components() {
        let gamma = axes(3, &[0, 1]);
        let r = parallel_in(&dvector![1.0, 1.0, 5.0], &dvector![2.0, 2.0, -7.0], &gamma, 1e-10).unwrap();
        assert!(r.parallel);
        let full = parallel_in(&dvector![1.0, 1.0, 5.0], &dvector![2.0, 2.0, -7.0], &Subspace::full(3), 1e-10).unwrap();
        assert!(!full.parallel);
    }

    #[test]
    fn zero_projection_is_distinct() {
        let r = parallel_in(&dvector![0.0, 0.0, 1.0], &dvector![1.0, 0.0, 0.0], &axes(3, &[0, 1]), 1e-10).unwrap();
        assert_eq!(r.status, ParallelStatus::ZeroProjection);
        assert!(!r.parallel && r.beta.is_none());
    }

    #[test]
    fn planted_beta_with_orthogonal_noise() {
        let gamma = Subspace::span_of_columns(&DMatrix::from_column_slice(4, 2, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 1.0]), TolPolicy::default());
        let inside = gamma.project(&dvector![0.3, -1.2, 2.0, 0.7]);
        let noise_a = gamma.complement().project(&dvector![1.0, 1.0, 1.0, 1.0]);
        let noise_b = gamma.complement().project(&dvector![-2.0, 0.0, 3.0, 1.0]);
        let r = parallel_in(&(&inside * 1.7 + noise_a), &(inside + noise_b), &gamma, 1e-10).unwrap();
        assert!(r.parallel);
        assert!((r.beta.unwrap() - 1.7).abs() < 1e-9);
    }

    fn parallel_model(beta: f64, seed: u64) -> PredictorTable {
        random_model(&SynthSpec::new(seed, 5, 6, 12, Planted::ParallelPair { beta, dim_f: 3 })).unwrap().table
    }

    #[test]
    fn logratio_trivial_cases() {
        let t = parallel_model(2.5, 1);
        let same = logratio_parallelism_check(&t, [0, 1, 0, 1], 1e-8).unwrap();
        assert!((same.beta.unwrap() - 1.0).abs() < 1e-12);
        let flipped = logratio_parallelism_check(&t, [0, 1, 1, 0], 1e-8).unwrap();
        assert!((flipped.beta.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn logratio_planted_beta() {
        let t = parallel_model(2.5, 2);
        let r = logratio_parallelism_check(&t, [0, 1, 2, 3], 1e-8).unwrap();
        assert!((r.beta.unwrap() - 2.5).abs() < 1e-8);
        assert!((r.ratio_beta.unwrap() - 2.5).abs() < 1e-8);
        let other = logratio_parallelism_check(&t, [0, 4, 2, 3], 1e-8).unwrap();
        assert!(other.beta.is_none());
    }

    fn glr_model(seed: u64, d: usize, dim_g: usize, gamma_dim: usize, in_m: bool) -> crate::synth::SynthOutput {
        random_model(&SynthSpec::new(seed, d, 7, 10, Planted::ExactGlr { dim_g, gamma_dim, gamma_q_in_m: in_m })).unwrap()
    }

    fn fitted(out: &crate::synth::SynthOutput) -> LinearRepFit {
        let gamma = out.truth.gamma_subspace().unwrap();
        fit_relational_linearity(&out.table, &out.truth.queries[0], &gamma, None, 1e-6).unwrap().into_fit().unwrap()
    }

    #[test]
    fn planted_relational_linearity_recovered() {
        let out = glr_model(3, 4, 3, 2, true);
        let fit = fitted(&out);
        assert!(fit.valid && fit.residual <= 1e-10);
        let (rows, _) = out.truth.affine.clone().unwrap();
        let a = DMatrix::from_fn(4, 4, |i, j| rows[i][j]);
        let expected = Subspace::span_of_columns(&(a.transpose() * fit.gamma.projector()), TolPolicy::default());
        assert!(fit.gamma_q.equals(&expected, 1e-8));
    }

    #[test]
    fn missing_rows_are_listed() {
        let out = glr_model(3, 4, 3, 2, true);
        let gamma = out.truth.gamma_subspace().unwrap();
        let err = fit_relational_linearity(&out.table, "t0", &gamma, Some(&["t1t0".into(), "t0".into()]), 1e-6).unwrap_err();
        match err {
            PropError::MissingSequences(list) => assert_eq!(list, vec!["t1t0t0".to_string(), "t0".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tautology_query_fits_constant() {
        let out = random_model(&SynthSpec::new(4, 4, 5, 8, Planted::Tautology { dim_g: 4, orthogonal_noise: false })).unwrap();
        let t = &out.table;
        let fit = fit_relational_linearity(t, "t0", &Subspace::full(4), None, 1e-6).unwrap().into_fit().unwrap();
        assert!(fit.valid);
        assert_eq!(fit.gamma_q.dim(), 0);
        let q = t.embedding(t.sequence_index("t0").unwrap());
        assert!((&fit.offset - q).norm() < 1e-10);
    }

    #[test]
    fn quadratic_dependence_is_not_linear() {
        let out = glr_model(5, 3, 3, 3, true);
        let t = &out.table;
        let mut e = t.embeddings().clone();
        let s = out.truth.contexts.len();
        for r in 0..s {
            let x = e[(r, 0)];
            e[(s + r, 1)] += x * x;
        }
        let bent = PredictorTable::new(t.alphabet().clone(), t.sample().clone(), e, t.unembeddings().clone(), 0).unwrap();
        let fit = fit_relational_linearity(&bent, "t0", &Subspace::full(3), None, 1e-6).unwrap().into_fit().unwrap();
        assert!(!fit.valid);
    }

    #[test]
    fn trivial_when_gamma_orthogonal_to_n() {
        let t = random_model(&SynthSpec::new(6, 4, 6, 40, Planted::ParallelPair { beta: 1.0, dim_f: 2 })).unwrap().table;
        let geo = effective_geometry(&t, TolPolicy::default());
        assert_eq!(geo.g.dim(), 4);
        let r = fit_relational_linearity(&t, "t1", &geo.n.complement(), None, 1e-6).unwrap();
        assert!(matches!(r, RelationalLinearity::Trivial { gamma_dim: 2, .. }));
        let fitted = fit_relational_linearity(&t, "t1", &Subspace::full(4), None, 1e-6).unwrap();
        assert!(fitted.fit().is_some());
    }

    #[test]
    fn witness_and_probe_from_exact_fit() {
        let out = glr_model(7, 4, 4, 4, true);
        let t = &out.table;
        let fit = fitted(&out);
        let w = ls_witness(&fit, t, 1, 2, 1e-8).unwrap();
        assert!(w.passed && w.identity_gap < 1e-9);
        let zero = ls_witness(&fit, t, 3, 3, 1e-8).unwrap();
        assert!(zero.passed);
        let probe = probe_params(&fit, t, &[1, 2, 5], 1e-8).unwrap();
        let report = check_probe(t, "t0", &probe, 1e-10).unwrap();
        assert!(report.passed, "gap {}", report.max_gap);
        assert!(matches!(probe_params(&fit, t, &[1], 1e-8), Err(PropError::Precondition(_))));
        let mut bad = probe.clone();
        for x in bad.w[0].iter_mut() {
            *x += 0.1;
        }
        assert!(!check_probe(t, "t0", &bad, 1e-10).unwrap().passed);
    }

    #[test]
    fn probe_condition_violations_itemized() {
        let out = glr_model(8, 4, 4, 2, true);
        let fit = fitted(&out);
        match probe_params(&fit, &out.table, &[1, 2, 3], 1e-8) {
            Err(PropError::ProbeCondition(pairs)) => assert_eq!(pairs.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn whole_alphabet_probe_is_full_conditional() {
        let out = random_model(&SynthSpec::new(9, 2, 2, 4, Planted::ExactGlr { dim_g: 1, gamma_dim: 1, gamma_q_in_m: true })).unwrap();
        let fit = fitted(&out);
        let probe = probe_params(&fit, &out.table, &[0, 1], 1e-8).unwrap();
        let t = &out.table;
        for &(s, sq) in &fit.pairs {
            let full = t.conditional_distribution(sq).unwrap();
            assert!((probe.predict(&t.embedding(s)) - full).abs().max() < 1e-10);
        }
    }

    fn manual_fit(gamma_q: Subspace, d: usize) -> LinearRepFit {
        LinearRepFit {
            query: "q".into(),
            gamma: Subspace::full(d),
            pairs: Vec::new(),
            a_map: gamma_q.projector(),
            offset: DVector::zeros(d),
            gamma_q,
            residual: 0.0,
            threshold: 0.0,
            valid: true,
            rank_deficient: false,
        }
    }

    #[test]
    fn steering_with_orthogonal_queries() {
        let f0 = manual_fit(axes(3, &[0]), 3);
        let f1 = manual_fit(axes(3, &[1]), 3);
        match steering_vector(&f0, &[f1]).unwrap() {
            Steering::Found { v, effect, leak } => {
                assert!((v[0] - 1.0).abs() < 1e-12);
                assert!(effect > 0.5 && leak < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn steering_absent_when_covered() {
        let f0 = manual_fit(axes(3, &[0, 1]), 3);
        let f1 = manual_fit(axes(3, &[0, 1]), 3);
        assert!(matches!(steering_vector(&f0, &[f1]).unwrap(), Steering::Absent { dim_gamma_q0: 2, dim_overlap: 2 }));
    }

    #[test]
    fn transfer_on_diverse_pair() {
        let out = glr_model(10, 4, 4, 2, false);
        let fit = fitted(&out);
        let (b, cert) = generate_equivalent(&out.table, &GeneratorOptions::new(4, 1), &EquivOptions::default()).unwrap();
        let moved = transfer_linearity(&fit, &cert, &out.table, &b, 1e-8).unwrap();
        assert!(moved.hypotheses.holds);
        assert!(moved.fit.valid, "residual {}", moved.fit.residual);
        assert!(moved.gamma_tilde_in_n <= 1e-8);
    }

    #[test]
    fn transfer_survives_nonlinear_distortion() {
        let out = glr_model(11, 5, 3, 2, true);
        let fit = fitted(&out);
        let (b, cert) = generate_equivalent(&out.table, &GeneratorOptions::new(7, 2).distortion(Distortion::cosine()), &EquivOptions::default()).unwrap();
        let moved = transfer_linearity(&fit, &cert, &out.table, &b, 1e-6).unwrap();
        assert!(moved.hypotheses.holds && moved.fit.valid);
        let refit = fit_relational_linearity(&b, "t0", &moved.fit.gamma, None, 1e-6).unwrap().into_fit().unwrap();
        assert!(refit.valid);
    }

    #[test]
    fn squared_distortion_outside_m_breaks_linearity() {
        let out = glr_model(12, 5, 3, 2, false);
        let fit = fitted(&out);
        assert!(fit.valid);
        let (b, cert) = generate_equivalent(&out.table, &GeneratorOptions::new(5, 3).distortion(Distortion::Square { scale: 1.0 }), &EquivOptions::default()).unwrap();
        let moved = transfer_linearity(&fit, &cert, &out.table, &b, 1e-6).unwrap();
        assert!(!moved.hypotheses.holds);
        assert!(!moved.fit.valid);
        let refit = fit_relational_linearity(&b, "t0", &moved.fit.gamma, None, 1e-6).unwrap().into_fit().unwrap();
        assert!(refit.residual > 0.01);
    }

    #[test]
    fn parallelism_transfers() {
        let t = parallel_model(3.0, 13);
        let (b, cert) = generate_equivalent(&t, &GeneratorOptions::new(6, 5), &EquivOptions::default()).unwrap();
        let gamma = t.unembedding(1) - t.unembedding(0);
        let gamma_prime = t.unembedding(3) - t.unembedding(2);
        let r = transfer_parallelism(&gamma, &gamma_prime, &cert, &t, &b, 1e-8).unwrap();
        assert!(r.agree && r.in_a.parallel && r.in_b.parallel);
        assert!((r.in_b.beta.unwrap() - 3.0).abs() < 1e-8);
        let same = transfer_parallelism(&gamma, &gamma, &cert, &t, &b, 1e-8).unwrap();
        assert!((same.in_a.beta.unwrap() - 1.0).abs() < 1e-12 && (same.in_b.beta.unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn full_space_parallelism_is_fragile() {
        let t = random_model(&SynthSpec::new(14, 4, 6, 10, Planted::ParallelPair { beta: 2.0, dim_f: 4 })).unwrap().table;
        let (b, _) = generate_equivalent(&t, &GeneratorOptions::new(7, 6).unembedding_noise(1.0), &EquivOptions::default()).unwrap();
        let diff = |m: &PredictorTable, i: usize, j: usize| m.unembedding(j) - m.unembedding(i);
        let va = parallel_views(&t, &diff(&t, 0, 1), &diff(&t, 2, 3), 1e-8).unwrap();
        let vb = parallel_views(&b, &diff(&b, 0, 1), &diff(&b, 2, 3), 1e-8).unwrap();
        assert!(va.full.parallel && va.in_n.parallel);
        assert!(!vb.full.parallel && vb.in_n.parallel);
        assert!((vb.in_n.beta.unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn paraphrase_cases() {
        let out = random_model(&SynthSpec::new(15, 4, 7, 9, Planted::Paraphrase { beta: 0.5, answers: 3 })).unwrap();
        let t = &out.table;
        let r = paraphrase_check(t, "t0", &[0, 1, 2], "t1", &[3, 4, 5], 1e-8).unwrap();
        assert!(r.paraphrase);
        assert!((r.beta.unwrap() - 0.5).abs() < 1e-8);
        assert!(r.identity_residual.unwrap() < 1e-9);
        assert_eq!(r.dim_gamma1, r.dim_gamma2);
        let same = paraphrase_check(t, "t0", &[0, 1, 2], "t0", &[0, 1, 2], 1e-8).unwrap();
        assert!((same.beta.unwrap() - 1.0).abs() < 1e-12);
        let o = same.omat.unwrap();
        let g = Subspace::span_of_rows(&DMatrix::from_fn(2, 4, |i, j| t.unembeddings()[(i + 1, j)] - t.unembeddings()[(0, j)]), TolPolicy::default());
        assert!((&o * g.projector() - g.projector()).abs().max() < 1e-10);
        let shuffled = paraphrase_check(t, "t0", &[0, 1, 2], "t1", &[3, 5, 4], 1e-8).unwrap();
        assert!(!shuffled.paraphrase);
    }

    #[test]
    fn tautology_cases() {
        for noise in [false, true] {
            let out = random_model(&SynthSpec::new(16, 4, 5, 6, Planted::Tautology { dim_g: 2, orthogonal_noise: noise })).unwrap();
            let r = tautology_check(&out.table, "t0", 1e-9).unwrap();
            assert!(r.tautology && r.projection_residual < 1e-10);
            assert_eq!(r.a_q.unwrap(), out.table.embedding(out.table.sequence_index("t0").unwrap()));
        }
        let generic = random_model(&SynthSpec::new(17, 4, 3, 30, Planted::None)).unwrap();
        assert!(!tautology_check(&generic.table, "t0", 1e-9).unwrap().tautology);
    }

    proptest! {
        #[test]
        fn scaled_vectors_are_parallel(values in proptest::collection::vec(-3.0f64..3.0, 4), scale in 0.1f64..4.0, flip in any::<bool>()) {
            let v = DVector::from_vec(values);
            prop_assume!(v.norm() > 1e-3);
            let beta = if flip { -scale } else { scale };
            let r = parallel_in(&(&v * beta), &v, &Subspace::full(4), 1e-10).unwrap();
            prop_assert!(r.parallel);
            prop_assert!((r.beta.unwrap() - beta).abs() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn degenerate_quadruples_give_unit_beta(seed in 0u64..500) {
            let t = random_model(&SynthSpec::new(seed, 4, 5, 10, Planted::None)).unwrap().table;
            let same = logratio_parallelism_check(&t, [1, 3, 1, 3], 1e-8).unwrap();
            prop_assert!((same.beta.unwrap() - 1.0).abs() <= 1e-10);
            let flipped = logratio_parallelism_check(&t, [1, 3, 3, 1], 1e-8).unwrap();
            prop_assert!((flipped.beta.unwrap() + 1.0).abs() <= 1e-10);
        }

        #[test]
        fn self_paraphrase_has_unit_beta(seed in 0u64..200) {
            let out = random_model(&SynthSpec::new(seed, 4, 7, 9, Planted::Paraphrase { beta: 0.7, answers: 3 })).unwrap();
            let r = paraphrase_check(&out.table, "t1", &[3, 4, 5], "t1", &[3, 4, 5], 1e-8).unwrap();
            prop_assert!(r.paraphrase);
            prop_assert!((r.beta.unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn planted_fits_have_gamma_q_inside_fitted_space(seed in 0u64..200) {
            let out = glr_model(seed, 4, 3, 2, true);
            let fit = fitted(&out);
            prop_assert!(fit.valid);
            let geo = effective_geometry(&out.table, TolPolicy::default());
            prop_assert!(geo.m.containment_residual(&fit.gamma_q) <= 1e-8);
            prop_assert!((&fit.a_map - fit.gamma.projector() * &fit.a_map).abs().max() <= 1e-10);
        }
    }
}
