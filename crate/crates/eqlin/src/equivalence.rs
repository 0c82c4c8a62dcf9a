//! Distribution equality, extended-linear (EL) certificates, linear (L)
//! equivalence, and a generator of equivalent models with controlled distortions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PredictorTable};
use crate::subspace::{
    effective_geometry, op_norm, pseudo_inverse, pseudo_inverse_with_floor, rank, EffectiveGeometry, Subspace,
    TolPolicy,
};
use crate::synth::{gaussian_matrix, with_retries, SynthError};

#[derive(Debug, Error)]
pub enum EquivError {
    #[error("structural mismatch: {0}")]
    Structural(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("target dimension {target} is below the effective complexity k = {k}")]
    TargetDimTooSmall { target: usize, k: usize },
    #[error("certificate shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Tolerances shared by the equivalence routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivOptions {
    /// Relative tolerance; residuals are compared against `tol · max(1, data scale)`.
    pub tol: f64,
    pub policy: TolPolicy,
}

impl Default for EquivOptions {
    fn default() -> Self {
        EquivOptions { tol: 1e-7, policy: TolPolicy::default() }
    }
}

impl EquivOptions {
    pub fn with_tol(tol: f64) -> Self {
        EquivOptions { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionCompareReport {
    pub max_logit_gap: f64,
    /// Largest total-variation distance between the two conditionals.
    pub max_prob_gap: f64,
    /// (sequence, token) attaining the logit gap.
    pub worst: Option<(String, String)>,
    /// Absolute threshold actually applied: tol · max(1, largest |logit|).
    pub threshold: f64,
    pub equal: bool,
}

/// Errors unless the two tables share alphabet, pivot and sequence sample.
pub fn check_structure(a: &PredictorTable, b: &PredictorTable) -> Result<(), EquivError> {
    if a.tokens() != b.tokens() {
        return Err(EquivError::Structural("alphabets differ".into()));
    }
    if a.pivot() != b.pivot() {
        return Err(EquivError::Structural(format!("pivots differ ({} vs {})", a.pivot(), b.pivot())));
    }
    if a.sequences() != b.sequences() {
        return Err(EquivError::Structural("sequence samples differ".into()));
    }
    Ok(())
}

pub fn distributions_equal(
    a: &PredictorTable,
    b: &PredictorTable,
    tol: f64,
) -> Result<DistributionCompareReport, EquivError> {
    check_structure(a, b)?;
    let la = a.pivoted_logits();
    let lb = b.pivoted_logits();
    let mut gap = 0.0;
    let mut worst = None;
    for i in 0..la.nrows() {
        for j in 0..la.ncols() {
            let diff = (la[(i, j)] - lb[(i, j)]).abs();
            if diff > gap || (worst.is_none() && diff.is_nan()) {
                gap = diff;
                worst = Some((i, j));
            }
        }
    }
    let mut prob_gap: f64 = 0.0;
    for i in 0..a.num_sequences() {
        let pa = a.conditional_distribution(i)?;
        let pb = b.conditional_distribution(i)?;
        prob_gap = prob_gap.max(0.5 * (pa - pb).abs().sum());
    }
    let scale = 1f64.max(la.abs().max()).max(lb.abs().max());
    let threshold = tol * scale;
    Ok(DistributionCompareReport {
        max_logit_gap: gap,
        max_prob_gap: prob_gap,
        worst: worst.map(|(i, j)| (a.sequences()[i].clone(), a.tokens()[j].clone())),
        threshold,
        equal: gap <= threshold && prob_gap <= threshold,
    })
}

/// Matrices (M, N) witnessing P_M f = M P_M̃ f̃ and P_N g0 = N P_Ñ g̃0 between models A and B.
#[derive(Debug, Clone, PartialEq)]
pub struct ElCertificate {
    pub k: usize,
    /// d×d̃ map on embeddings.
    pub m: DMatrix<f64>,
    /// d×d̃ map on pivoted unembeddings.
    pub n: DMatrix<f64>,
    pub residual_f: f64,
    pub residual_g: f64,
    pub residual_compat: f64,
    pub verdict: bool,
    pub distribution: Option<DistributionCompareReport>,
}

#[derive(Serialize, Deserialize)]
struct CertificateResiduals {
    f: f64,
    g: f64,
    compat: f64,
}

#[derive(Serialize, Deserialize)]
struct CertificateFile {
    k: usize,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    n: Vec<Vec<f64>>,
    residuals: CertificateResiduals,
    verdict: bool,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>, EquivError> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(EquivError::Shape(format!("ragged rows in {what}")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl ElCertificate {
    pub fn to_json(&self) -> String {
        let file = CertificateFile {
            k: self.k,
            m: matrix_rows(&self.m),
            n: matrix_rows(&self.n),
            residuals: CertificateResiduals { f: self.residual_f, g: self.residual_g, compat: self.residual_compat },
            verdict: self.verdict,
        };
        let mut s = serde_json::to_string(&file).expect("certificate serializes");
        s.push('\n');
        s
    }

    /// Parses a certificate; `target_dim` fixes the column count when the matrices have no rows.
    pub fn from_json(text: &str, target_dim: usize) -> Result<Self, EquivError> {
        let file: CertificateFile = serde_json::from_str(text).map_err(ModelError::from)?;
        let cols = |rows: &[Vec<f64>]| rows.first().map_or(target_dim, Vec::len);
        Ok(ElCertificate {
            k: file.k,
            m: rows_matrix(&file.m, cols(&file.m), "M")?,
            n: rows_matrix(&file.n, cols(&file.n), "N")?,
            residual_f: file.residuals.f,
            residual_g: file.residuals.g,
            residual_compat: file.residuals.compat,
            verdict: file.verdict,
            distribution: None,
        })
    }

    /// Certificate for B → A: (M⁺, N⁺).
    pub fn reversed(&self, b: &PredictorTable, a: &PredictorTable, opts: &EquivOptions) -> Result<Self, EquivError> {
        from_matrices(b, a, pseudo_inverse(&self.m, opts.policy), pseudo_inverse(&self.n, opts.policy), opts)
    }

    /// Certificate for A → C from `self` (A → B) and `next` (B → C).
    pub fn compose(&self, next: &ElCertificate, a: &PredictorTable, c: &PredictorTable, opts: &EquivOptions) -> Result<Self, EquivError> {
        from_matrices(a, c, &self.m * &next.m, &self.n * &next.n, opts)
    }
}

/// Largest Euclidean norm among the rows of `m`.
pub(crate) fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

struct Residuals {
    f: f64,
    g: f64,
    compat: f64,
    scale_f: f64,
    scale_g: f64,
}

fn residuals(
    a: &PredictorTable,
    b: &PredictorTable,
    ga: &EffectiveGeometry,
    gb: &EffectiveGeometry,
    m: &DMatrix<f64>,
    n: &DMatrix<f64>,
) -> Residuals {
    let ea = a.embeddings() * ga.m.projector();
    let eb = b.embeddings() * gb.m.projector() * m.transpose();
    let ua = a.pivot_differences().into_rows() * ga.n.projector();
    let ub = b.pivot_differences().into_rows() * gb.n.projector() * n.transpose();
    let compat = m.transpose() * n - gb.m.projector() * gb.n.projector();
    Residuals {
        f: max_row_norm(&(&ea - eb)),
        g: max_row_norm(&(&ua - ub)),
        compat: op_norm(&compat),
        scale_f: 1f64.max(max_row_norm(&ea)),
        scale_g: 1f64.max(max_row_norm(&ua)),
    }
}

fn check_shapes(a: &PredictorTable, b: &PredictorTable, m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<(), EquivError> {
    let want = (a.dim(), b.dim());
    if m.shape() != want || n.shape() != want {
        return Err(EquivError::Shape(format!(
            "M is {:?}, N is {:?}, expected {:?}",
            m.shape(),
            n.shape(),
            want
        )));
    }
    Ok(())
}

/// Wraps given matrices into a certificate, measuring residuals and ranks.
pub fn from_matrices(
    a: &PredictorTable,
    b: &PredictorTable,
    m: DMatrix<f64>,
    n: DMatrix<f64>,
    opts: &EquivOptions,
) -> Result<ElCertificate, EquivError> {
    check_shapes(a, b, &m, &n)?;
    let ga = effective_geometry(a, opts.policy);
    let gb = effective_geometry(b, opts.policy);
    let r = residuals(a, b, &ga, &gb, &m, &n);
    let k = ga.k;
    let verdict = ga.k == gb.k
        && rank(&m, opts.policy) == k
        && rank(&n, opts.policy) == k
        && r.f <= opts.tol * r.scale_f
        && r.g <= opts.tol * r.scale_g
        && r.compat <= opts.tol;
    Ok(ElCertificate { k, m, n, residual_f: r.f, residual_g: r.g, residual_compat: r.compat, verdict, distribution: None })
}

/// Closed-form certificate: M = (P_G P_F)⁺ (Gᵀ)⁺ G̃ᵀ P_G̃ P_F̃ and N = (P_F P_G)⁺ (Mᵀ)⁺ P_F̃ P_G̃.
pub fn compute_el_certificate(
    a: &PredictorTable,
    b: &PredictorTable,
    opts: &EquivOptions,
) -> Result<ElCertificate, EquivError> {
    let report = distributions_equal(a, b, opts.tol)?;
    let ga = effective_geometry(a, opts.policy);
    let gb = effective_geometry(b, opts.policy);
    let (pf, pg) = (ga.f.projector(), ga.g.projector());
    let (pft, pgt) = (gb.f.projector(), gb.g.projector());
    let rows_a = a.pivot_differences().into_rows();
    let rows_b = b.pivot_differences().into_rows();
    let m = pseudo_inverse_with_floor(&(&pg * &pf), opts.policy, 1.0)
        * pseudo_inverse(&rows_a, opts.policy)
        * rows_b
        * (&pgt * &pft);
    let n = pseudo_inverse_with_floor(&(&pf * &pg), opts.policy, 1.0)
        * pseudo_inverse(&m.transpose(), opts.policy)
        * (&pft * &pgt);
    let mut cert = from_matrices(a, b, m, n, opts)?;
    cert.verdict &= report.equal;
    cert.distribution = Some(report);
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Re-checks every defining condition of an EL certificate from scratch.
pub fn verify_el_equivalence(
    a: &PredictorTable,
    b: &PredictorTable,
    cert: &ElCertificate,
    opts: &EquivOptions,
) -> Result<VerificationReport, EquivError> {
    check_structure(a, b)?;
    check_shapes(a, b, &cert.m, &cert.n)?;
    let ga = effective_geometry(a, opts.policy);
    let gb = effective_geometry(b, opts.policy);
    let r = residuals(a, b, &ga, &gb, &cert.m, &cert.n);
    let tol = opts.tol;
    let mut checks = Vec::new();
    let mut exact = |name, value: usize| checks.push(Check { name, passed: value == 0, value: value as f64, threshold: 0.0 });
    exact("dim_m", ga.k.abs_diff(cert.k) + gb.k.abs_diff(cert.k));
    exact("rank_m", rank(&cert.m, opts.policy).abs_diff(cert.k));
    exact("rank_n", rank(&cert.n, opts.policy).abs_diff(cert.k));

    let rel = |x: &DMatrix<f64>, y: &DMatrix<f64>| op_norm(&(x - y)) / 1f64.max(op_norm(y));
    let mut approx = |name, value: f64, threshold: f64| checks.push(Check { name, passed: value <= threshold, value, threshold });
    approx("image_m", rel(&(ga.m.projector() * &cert.m), &cert.m), tol);
    approx("coimage_m", rel(&(&cert.m * gb.m.projector()), &cert.m), tol);
    approx("image_n", rel(&(ga.n.projector() * &cert.n), &cert.n), tol);
    approx("coimage_n", rel(&(&cert.n * gb.n.projector()), &cert.n), tol);
    approx("compat", r.compat, tol);
    approx("embeddings", r.f, tol * r.scale_f);
    approx("unembeddings", r.g, tol * r.scale_g);

    let mapped_f = b.embeddings() * gb.m.projector() * cert.m.transpose();
    let mapped_g = b.pivot_differences().into_rows() * gb.n.projector() * cert.n.transpose();
    let via_cert = mapped_f * mapped_g.transpose();
    let direct = a.pivoted_logits();
    let scale = 1f64.max(direct.abs().max());
    approx("dot_products", (via_cert - &direct).abs().max(), tol * scale);

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport { checks, passed })
}

/// Outcome of searching for an invertible M with f = M f̃ and g0 = M⁻ᵀ g̃0.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEquivalence {
    /// Present iff the pair is linearly equivalent within tolerance.
    pub matrix: Option<DMatrix<f64>>,
    /// The candidate that was tested.
    pub candidate: DMatrix<f64>,
    pub residual_f: f64,
    pub residual_g: f64,
    /// Whether A satisfies the diversity condition (closed-form candidate used).
    pub diverse: bool,
}

/// Decides linear equivalence between equal-dimension tables.
///
/// Diverse A uses the closed form M = (G0_A)⁺ G0_B. Otherwise the minimum-norm
/// least-squares fit of f from f̃ is tested, which may miss an invertible solution
/// when F is a proper subspace.
pub fn check_l_equivalence(
    a: &PredictorTable,
    b: &PredictorTable,
    opts: &EquivOptions,
) -> Result<LinearEquivalence, EquivError> {
    check_structure(a, b)?;
    if a.dim() != b.dim() {
        return Err(EquivError::Precondition(format!("dimensions differ ({} vs {})", a.dim(), b.dim())));
    }
    let diverse = crate::subspace::diversity_check(a);
    let rows_a = a.pivot_differences().into_rows();
    let rows_b = b.pivot_differences().into_rows();
    let candidate = if diverse {
        pseudo_inverse(&rows_a, opts.policy) * &rows_b
    } else {
        a.embeddings().transpose() * pseudo_inverse(b.embeddings(), opts.policy).transpose()
    };
    let residual_f = max_row_norm(&(a.embeddings() - b.embeddings() * candidate.transpose()));
    let scale_f = 1f64.max(max_row_norm(a.embeddings()));
    let scale_g = 1f64.max(max_row_norm(&rows_a));
    let invertible = rank(&candidate, opts.policy) == a.dim();
    let (residual_g, inverse) = match candidate.clone().try_inverse().filter(|_| invertible) {
        Some(inv) => (max_row_norm(&(&rows_a - &rows_b * inv)), true),
        None => (f64::INFINITY, false),
    };
    let ok = inverse && residual_f <= opts.tol * scale_f && residual_g <= opts.tol * scale_g;
    Ok(LinearEquivalence { matrix: ok.then(|| candidate.clone()), candidate, residual_f, residual_g, diverse })
}

/// Relative Frobenius residual ‖T − S Lᵀ‖ / ‖T‖ of the best linear map L taking source rows to target rows.
pub fn linear_fit_residual(target: &DMatrix<f64>, source: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let l = target.transpose() * pseudo_inverse(source, TolPolicy::default()).transpose();
    let resid = (target - source * l.transpose()).norm();
    let norm = target.norm();
    (l, if norm > 0.0 { resid / norm } else { resid })
}

/// Component added outside Im(T) to the generated embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    None,
    /// n(x) = K · scale · R f(x).
    Linear { scale: f64 },
    /// n(x) = K · (z + amplitude · cos(frequency · z)), z = R f(x).
    Cosine { amplitude: f64, frequency: f64 },
    /// n(x) = K · (scale · z²), z = R f(x); the linear part of z is discarded.
    Square { scale: f64 },
}

impl Distortion {
    /// The per-coordinate cosine warp used by the classic non-identifiability example.
    pub fn cosine() -> Self {
        Distortion::Cosine { amplitude: 0.2, frequency: 40.0 / std::f64::consts::PI }
    }

    fn apply(&self, z: f64) -> f64 {
        match *self {
            Distortion::None => 0.0,
            Distortion::Linear { scale } => scale * z,
            Distortion::Cosine { amplitude, frequency } => z + amplitude * (frequency * z).cos(),
            Distortion::Square { scale } => scale * z * z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOptions {
    pub target_dim: usize,
    pub distortion: Distortion,
    /// Scale of random unembedding components placed orthogonally to every embedding (0 disables).
    pub unembedding_noise: f64,
    pub pivot_shift: Option<DVector<f64>>,
    pub seed: u64,
}

impl GeneratorOptions {
    pub fn new(target_dim: usize, seed: u64) -> Self {
        GeneratorOptions { target_dim, distortion: Distortion::None, unembedding_noise: 0.0, pivot_shift: None, seed }
    }

    pub fn distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn unembedding_noise(mut self, scale: f64) -> Self {
        self.unembedding_noise = scale;
        self
    }

    pub fn pivot_shift(mut self, shift: DVector<f64>) -> Self {
        self.pivot_shift = Some(shift);
        self
    }
}

/// Builds B with the same conditionals as A in dimension `target_dim`, plus the ground-truth certificate A → B.
pub fn generate_equivalent(
    a: &PredictorTable,
    gen: &GeneratorOptions,
    opts: &EquivOptions,
) -> Result<(PredictorTable, ElCertificate), EquivError> {
    let geo = effective_geometry(a, opts.policy);
    let (k, dt, d) = (geo.k, gen.target_dim, a.dim());
    if dt < k {
        return Err(EquivError::TargetDimTooSmall { target: dt, k });
    }
    if dt == 0 {
        return Err(EquivError::Precondition("target dimension must be positive".into()));
    }
    if let Some(shift) = &gen.pivot_shift {
        if shift.len() != dt {
            return Err(EquivError::Precondition(format!("pivot shift has length {}, expected {dt}", shift.len())));
        }
    }
    let (bm, bn) = (geo.m.basis(), geo.n.basis());
    let coupling = bm.transpose() * bn;
    let u = a.embeddings() * bm;
    let v = a.pivot_differences().into_rows() * bn;

    let (t, mix, noise) = with_retries(gen.seed, |rng| {
        let t = gaussian_matrix(rng, dt, k);
        let sigma = crate::subspace::singular_values(&t);
        let well_posed = sigma.last().is_none_or(|&s| s > 1e-3 * sigma[0]);
        let mix = gaussian_matrix(rng, dt - k, d);
        let noise = gaussian_matrix(rng, a.num_tokens(), dt - k);
        well_posed.then_some((t, mix, noise))
    })?;

    let gram_inv = (t.transpose() * &t).try_inverse().ok_or_else(|| {
        EquivError::Precondition("random factor lost full column rank".into())
    })?;
    let s = &t * gram_inv * coupling.transpose();

    let kernel = Subspace::span_of_columns(&t, opts.policy).complement();
    let free = kernel.dim();
    let g_free = if gen.unembedding_noise > 0.0 {
        if gen.distortion == Distortion::None { free } else { free / 2 }
    } else {
        0
    };
    let f_free = free - g_free;
    let kf = kernel.basis().columns(0, f_free).into_owned();
    let kg = kernel.basis().columns(f_free, g_free).into_owned();

    let scaled_mix = mix.rows(0, f_free).into_owned() / (d as f64).sqrt();
    let z = a.embeddings() * scaled_mix.transpose();
    let distorted = z.map(|x| gen.distortion.apply(x));
    let embeddings = u * s.transpose() + distorted * kf.transpose();

    let mut unembeddings = v * t.transpose();
    if g_free > 0 {
        let mut extra = noise.columns(0, g_free).into_owned() * gen.unembedding_noise;
        extra.row_mut(a.pivot()).fill(0.0);
        unembeddings += extra * kg.transpose();
    }
    if let Some(shift) = &gen.pivot_shift {
        for mut row in unembeddings.row_iter_mut() {
            row += shift.transpose();
        }
    }
    let b = PredictorTable::new(a.alphabet().clone(), a.sample().clone(), embeddings, unembeddings, a.pivot())?;

    let gb = effective_geometry(&b, opts.policy);
    let coupling_inv_t = coupling.transpose().try_inverse().ok_or_else(|| {
        EquivError::Precondition("coupling between M and N is singular".into())
    })?;
    let m = bm * coupling_inv_t * t.transpose() * gb.m.projector();
    let n = bn * pseudo_inverse(&t, opts.policy);
    let cert = from_matrices(a, &b, m, n, opts)?;
    Ok((b, cert))
}
