//! Deterministic generators: the small worked examples and seeded random
//! tables with planted structure and machine-readable ground truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, PredictorTable};
use crate::subspace::{pseudo_inverse, rank, Subspace, TolPolicy};

/// Redraws allowed before a degenerate random construction is given up.
pub const MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("inconsistent synthesis parameters: {0}")]
    Inconsistent(String),
    #[error("no non-degenerate draw after {MAX_ATTEMPTS} attempts from seed {0}")]
    Exhausted(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Runs `draw` on generators seeded `seed, seed+1, …` until it returns a value.
pub(crate) fn with_retries<T>(
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Option<T>,
) -> Result<T, SynthError> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        if let Some(value) = draw(&mut rng) {
            return Ok(value);
        }
    }
    Err(SynthError::Exhausted(seed))
}

pub(crate) fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal d×r matrix spanning a random r-dimensional subspace.
fn random_orthonormal(rng: &mut impl Rng, d: usize, r: usize) -> Option<DMatrix<f64>> {
    let raw = gaussian_matrix(rng, d, r);
    let q = raw.clone().qr().q();
    let basis = q.columns(0, r).into_owned();
    (rank(&raw, TolPolicy::default()) == r).then_some(basis)
}

/// The first `count` strings in shortlex order over `tokens`, starting at length `min_len`.
pub fn shortlex(tokens: &[String], count: usize, min_len: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    let mut layer: Vec<String> = vec![String::new()];
    for _ in 0..min_len {
        layer = layer.iter().flat_map(|p| tokens.iter().map(move |t| format!("{p}{t}"))).collect();
    }
    while out.len() < count {
        out.extend(layer.iter().take(count - out.len()).cloned());
        layer = layer.iter().flat_map(|p| tokens.iter().map(move |t| format!("{p}{t}"))).collect();
    }
    out
}

fn token_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("t{i}")).collect()
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// d = 3 table with F = span(e1, e2) and G = span(e1, e3).
pub fn rank_one_model() -> PredictorTable {
    let embeddings = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    let unembeddings = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    PredictorTable::from_parts(strings(&["a", "b", "c"]), strings(&["a", "b", "ab"]), embeddings, unembeddings, 0)
        .expect("static example is valid")
}

/// The non-identifiability pair on the default 8×8 grid.
pub fn nonidentifiable_pair() -> (PredictorTable, PredictorTable) {
    nonidentifiable_pair_on_grid(8)
}

/// A: f on a regular `side`×`side` grid over [−1, 1]², g = (1,0), (1,1), (1,−1).
/// B: same g, f̃ = (f1 + 0.2 cos(40 f1 / π), f2).
pub fn nonidentifiable_pair_on_grid(side: usize) -> (PredictorTable, PredictorTable) {
    assert!(side >= 2, "grid needs at least two points per axis");
    let tokens = strings(&["y0", "y1", "y2"]);
    let sequences = shortlex(&tokens, side * side, 1);
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (side - 1) as f64;
    let a_emb = DMatrix::from_fn(side * side, 2, |r, c| if c == 0 { coord(r / side) } else { coord(r % side) });
    let b_emb = DMatrix::from_fn(side * side, 2, |r, c| {
        let f1 = a_emb[(r, 0)];
        if c == 0 {
            f1 + 0.2 * (40.0 * f1 / std::f64::consts::PI).cos()
        } else {
            a_emb[(r, 1)]
        }
    });
    let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, -1.0]);
    let a = PredictorTable::from_parts(tokens.clone(), sequences.clone(), a_emb, g.clone(), 0).expect("valid");
    let b = PredictorTable::from_parts(tokens, sequences, b_emb, g, 0).expect("valid");
    (a, b)
}

/// Structure planted by [`random_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Planted {
    /// Gaussian embeddings and unembeddings.
    None,
    /// Gaussian draws redrawn until dim F = dim G = d.
    Diversity,
    /// Prescribed dim F, dim G and dim(F ∩ G⊥); k = dim_f − dim_f_cap_g_perp.
    LowRank { dim_f: usize, dim_g: usize, dim_f_cap_g_perp: usize },
    /// Query token `t0` with P_Γ f(s⌢q) = P_Γ(A f(s) + a) exactly; F = R^d, dim G = `dim_g`, Γ ⊆ G.
    ExactGlr { dim_g: usize, gamma_dim: usize, gamma_q_in_m: bool },
    /// g(t1) − g(t0) = β (g(t3) − g(t2)) + ν with ν ⟂ F; F has dimension `dim_f`.
    ParallelPair { beta: f64, dim_f: usize },
    /// Query tokens `t0`, `t1` answered over `answers` tokens each, log-ratios proportional by β.
    Paraphrase { beta: f64, answers: usize },
    /// Query token `t0` with f(s⌢q) = f(q), optionally plus noise orthogonal to G (dim G = `dim_g`).
    Tautology { dim_g: usize, orthogonal_noise: bool },
}

/// Seeded recipe for a random table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Representation dimension.
    pub d: usize,
    /// Alphabet size.
    pub k: usize,
    /// Number of base sequences (contexts for query-based plants).
    pub s: usize,
    pub planted: Planted,
}

impl SynthSpec {
    pub fn new(seed: u64, d: usize, k: usize, s: usize, planted: Planted) -> Self {
        SynthSpec { seed, d, k, s, planted }
    }
}

/// Ground truth accompanying a planted table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedTruth {
    pub spec: SynthSpec,
    /// Expected effective complexity.
    pub k: usize,
    /// Query suffix(es) for query-based plants.
    pub queries: Vec<String>,
    /// Context sequences s for which s⌢q rows exist.
    pub contexts: Vec<String>,
    /// Orthonormal basis (columns, stored row-major as d rows) of the planted Γ, when any.
    pub gamma: Option<Vec<Vec<f64>>>,
    /// Planted affine map (A, a) for relational linearity.
    pub affine: Option<(Vec<Vec<f64>>, Vec<f64>)>,
    /// Planted proportionality constant.
    pub beta: Option<f64>,
    /// Tokens involved (quadruple, or the two answer sets concatenated).
    pub tokens: Vec<String>,
}

impl PlantedTruth {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }

    pub fn gamma_subspace(&self) -> Option<Subspace> {
        self.gamma.as_ref().map(|rows| {
            let d = rows.len();
            let r = rows.first().map_or(0, Vec::len);
            Subspace::from_orthonormal(DMatrix::from_fn(d, r, |i, j| rows[i][j]), 0.0)
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub table: PredictorTable,
    pub truth: PlantedTruth,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn inconsistent(msg: impl Into<String>) -> SynthError {
    SynthError::Inconsistent(msg.into())
}

fn validate(spec: &SynthSpec) -> Result<(), SynthError> {
    let SynthSpec { d, k, s, .. } = *spec;
    if d == 0 || k < 2 || s == 0 {
        return Err(inconsistent("need d ≥ 1, K ≥ 2, S ≥ 1"));
    }
    match spec.planted {
        Planted::None => {}
        Planted::Diversity => {
            if s < d || k < d + 1 {
                return Err(inconsistent(format!("diversity needs S ≥ d and K ≥ d+1 (d={d}, K={k}, S={s})")));
            }
        }
        Planted::LowRank { dim_f, dim_g, dim_f_cap_g_perp: c } => {
            if dim_f > s.min(d) || dim_g > (k - 1).min(d) {
                return Err(inconsistent("dim F must be ≤ min(S, d) and dim G ≤ min(K−1, d)"));
            }
            if c > dim_f || dim_f - c > dim_g || dim_g + c > d {
                return Err(inconsistent(format!(
                    "dim(F∩G⊥)={c} incompatible with dim F={dim_f}, dim G={dim_g}, d={d}"
                )));
            }
        }
        Planted::ExactGlr { dim_g, gamma_dim, .. } => {
            if dim_g == 0 || dim_g > d || dim_g > k - 1 || gamma_dim == 0 || gamma_dim > dim_g || s < d + 1 {
                return Err(inconsistent("relational plant needs 1 ≤ dim Γ ≤ dim G ≤ min(d, K−1) and S ≥ d+1"));
            }
        }
        Planted::ParallelPair { dim_f, .. } => {
            if k < 4 || dim_f == 0 || dim_f > d.min(s) {
                return Err(inconsistent("parallel pair needs K ≥ 4 and 1 ≤ dim F ≤ min(d, S)"));
            }
        }
        Planted::Paraphrase { beta, answers } => {
            if beta == 0.0 || answers < 2 || answers > d + 1 || k < (2 * answers).max(3) || s < d + 1 {
                return Err(inconsistent("paraphrase needs β ≠ 0, 2 ≤ |Y| ≤ d+1, K ≥ max(2|Y|, 3), S ≥ d+1"));
            }
        }
        Planted::Tautology { dim_g, orthogonal_noise } => {
            if dim_g == 0 || dim_g > d.min(k - 1) || (orthogonal_noise && dim_g == d) {
                return Err(inconsistent("tautology needs 1 ≤ dim G ≤ min(d, K−1), and dim G < d for orthogonal noise"));
            }
        }
    }
    Ok(())
}

/// Draws a seeded random table with the requested planted structure.
pub fn random_model(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    validate(spec)?;
    let tokens = token_names(spec.k);
    let (d, k, s) = (spec.d, spec.k, spec.s);
    let truth = |k_eff| PlantedTruth {
        spec: spec.clone(),
        k: k_eff,
        queries: Vec::new(),
        contexts: Vec::new(),
        gamma: None,
        affine: None,
        beta: None,
        tokens: Vec::new(),
    };
    let build = |seqs: Vec<String>, e: DMatrix<f64>, u: DMatrix<f64>| {
        PredictorTable::from_parts(tokens.clone(), seqs, e, u, 0)
    };
    let policy = TolPolicy::default();

    match spec.planted {
        Planted::None | Planted::Diversity => {
            let full = spec.planted == Planted::Diversity;
            let (e, u) = with_retries(spec.seed, |rng| {
                let e = gaussian_matrix(rng, s, d);
                let u = gaussian_matrix(rng, k, d);
                let table = build(shortlex(&tokens, s, 1), e.clone(), u.clone()).ok()?;
                (!full || crate::subspace::diversity_check(&table)).then_some((e, u))
            })?;
            let table = build(shortlex(&tokens, s, 1), e, u)?;
            let k_eff = crate::subspace::effective_geometry(&table, policy).k;
            Ok(SynthOutput { table, truth: truth(k_eff) })
        }
        Planted::LowRank { dim_f, dim_g, dim_f_cap_g_perp: c } => {
            let (e, u) = with_retries(spec.seed, |rng| {
                let q = random_orthonormal(rng, d, d)?;
                let mut f_span = DMatrix::zeros(d, dim_f);
                f_span.columns_mut(0, c).copy_from(&q.columns(0, c));
                f_span.columns_mut(c, dim_f - c).copy_from(&gaussian_matrix(rng, d, dim_f - c));
                let g_basis = q.columns(c, d - c) * random_orthonormal(rng, d - c, dim_g)?;
                let e = gaussian_matrix(rng, s, dim_f) * f_span.transpose();
                let u = unembeddings_in(rng, k, &g_basis);
                let table = build(shortlex(&tokens, s, 1), e.clone(), u.clone()).ok()?;
                let geo = crate::subspace::effective_geometry(&table, policy);
                (geo.f.dim() == dim_f && geo.g.dim() == dim_g && geo.k == dim_f - c).then_some((e, u))
            })?;
            let table = build(shortlex(&tokens, s, 1), e, u)?;
            Ok(SynthOutput { table, truth: truth(dim_f - c) })
        }
        Planted::ExactGlr { dim_g, gamma_dim, gamma_q_in_m } => exact_glr(spec, &tokens, dim_g, gamma_dim, gamma_q_in_m),
        Planted::ParallelPair { beta, dim_f } => parallel_pair(spec, &tokens, beta, dim_f),
        Planted::Paraphrase { beta, answers } => paraphrase(spec, &tokens, beta, answers),
        Planted::Tautology { dim_g, orthogonal_noise } => tautology(spec, &tokens, dim_g, orthogonal_noise),
    }
}

/// Contexts over every token except the first `reserved`, so that no context contains a query token.
fn contexts(tokens: &[String], reserved: usize, count: usize) -> Vec<String> {
    shortlex(&tokens[reserved..], count, 1)
}

/// Unembeddings g(y) = g(y0) + B_G c_y with g(y0) random and the differences spanning `g_basis`.
fn unembeddings_in(rng: &mut impl Rng, k: usize, g_basis: &DMatrix<f64>) -> DMatrix<f64> {
    let d = g_basis.nrows();
    let offset = gaussian_vector(rng, d);
    let mut u = gaussian_matrix(rng, k, g_basis.ncols()) * g_basis.transpose();
    for mut row in u.row_iter_mut() {
        row += offset.transpose();
    }
    u
}

fn exact_glr(
    spec: &SynthSpec,
    tokens: &[String],
    dim_g: usize,
    gamma_dim: usize,
    gamma_q_in_m: bool,
) -> Result<SynthOutput, SynthError> {
    let (d, k, s) = (spec.d, spec.k, spec.s);
    let query = tokens[0].clone();
    let ctx = contexts(tokens, 1, s);
    let mut seqs = ctx.clone();
    seqs.extend(ctx.iter().map(|c| format!("{c}{query}")));
    let built = with_retries(spec.seed, |rng| {
        let g_basis = random_orthonormal(rng, d, dim_g)?;
        let gamma = &g_basis * random_orthonormal(rng, dim_g, gamma_dim)?;
        let u = unembeddings_in(rng, k, &g_basis);
        let base = gaussian_matrix(rng, s, d);
        let mut a_map = gaussian_matrix(rng, d, d) / (d as f64).sqrt();
        if gamma_q_in_m {
            a_map *= &g_basis * g_basis.transpose();
        }
        let offset = gaussian_vector(rng, d);
        let p_gamma = &gamma * gamma.transpose();
        let outside = DMatrix::identity(d, d) - &p_gamma;
        let free = gaussian_matrix(rng, s, d) * outside;
        let mut queried = &base * a_map.transpose() + free;
        for mut row in queried.row_iter_mut() {
            row += offset.transpose();
        }
        let mut e = DMatrix::zeros(2 * s, d);
        e.rows_mut(0, s).copy_from(&base);
        e.rows_mut(s, s).copy_from(&queried);
        let table = PredictorTable::from_parts(tokens.to_vec(), seqs.clone(), e, u, 0).ok()?;
        let geo = crate::subspace::effective_geometry(&table, TolPolicy::default());
        let ok = geo.f.dim() == d && geo.g.dim() == dim_g && rank(&base, TolPolicy::default()) == d;
        ok.then_some((table, gamma, a_map, offset))
    })?;
    let (table, gamma, a_map, offset) = built;
    Ok(SynthOutput {
        table,
        truth: PlantedTruth {
            spec: spec.clone(),
            k: dim_g,
            queries: vec![query],
            contexts: ctx,
            gamma: Some(rows_of(&gamma)),
            affine: Some((rows_of(&a_map), offset.iter().copied().collect())),
            beta: None,
            tokens: Vec::new(),
        },
    })
}

fn parallel_pair(spec: &SynthSpec, tokens: &[String], beta: f64, dim_f: usize) -> Result<SynthOutput, SynthError> {
    let (d, k, s) = (spec.d, spec.k, spec.s);
    let seqs = shortlex(tokens, s, 1);
    let table = with_retries(spec.seed, |rng| {
        let f_basis = random_orthonormal(rng, d, dim_f)?;
        let e = gaussian_matrix(rng, s, dim_f) * f_basis.transpose();
        let mut u = gaussian_matrix(rng, k, d);
        let delta: DVector<f64> = (u.row(3) - u.row(2)).transpose();
        let outside_f = DMatrix::identity(d, d) - &f_basis * f_basis.transpose();
        let nu = outside_f * gaussian_vector(rng, d);
        let row1 = u.row(0).transpose() + &delta * beta + nu;
        u.set_row(1, &row1.transpose());
        let table = PredictorTable::from_parts(tokens.to_vec(), seqs.clone(), e, u, 0).ok()?;
        let proj = f_basis.transpose() * delta;
        (rank(table.embeddings(), TolPolicy::default()) == dim_f && proj.norm() > 1e-3).then_some(table)
    })?;
    Ok(SynthOutput {
        table,
        truth: PlantedTruth {
            spec: spec.clone(),
            k: dim_f,
            queries: Vec::new(),
            contexts: Vec::new(),
            gamma: None,
            affine: None,
            beta: Some(beta),
            tokens: tokens[..4].to_vec(),
        },
    })
}

fn paraphrase(spec: &SynthSpec, tokens: &[String], beta: f64, answers: usize) -> Result<SynthOutput, SynthError> {
    let (d, k, s) = (spec.d, spec.k, spec.s);
    let (q1, q2) = (tokens[0].clone(), tokens[1].clone());
    let ctx = contexts(tokens, 2, s);
    let mut seqs = ctx.clone();
    seqs.extend(ctx.iter().map(|c| format!("{c}{q1}")));
    seqs.extend(ctx.iter().map(|c| format!("{c}{q2}")));
    let y1: Vec<usize> = (0..answers).collect();
    let y2: Vec<usize> = (answers..2 * answers).collect();
    let table = with_retries(spec.seed, |rng| {
        let u = gaussian_matrix(rng, k, d);
        let diffs = |ys: &[usize]| DMatrix::from_fn(ys.len() - 1, d, |i, j| u[(ys[i + 1], j)] - u[(ys[0], j)]);
        let (g1, g2) = (diffs(&y1), diffs(&y2));
        if rank(&g1, TolPolicy::default()) != answers - 1 || rank(&g2, TolPolicy::default()) != answers - 1 {
            return None;
        }
        let base = gaussian_matrix(rng, s, d);
        let second = gaussian_matrix(rng, s, d);
        let p_gamma1 = Subspace::span_of_rows(&g1, TolPolicy::default()).projector();
        let outside = DMatrix::identity(d, d) - p_gamma1;
        let map = pseudo_inverse(&g1, TolPolicy::default()) * &g2 * beta;
        let first = &second * map.transpose() + gaussian_matrix(rng, s, d) * outside;
        let mut e = DMatrix::zeros(3 * s, d);
        e.rows_mut(0, s).copy_from(&base);
        e.rows_mut(s, s).copy_from(&first);
        e.rows_mut(2 * s, s).copy_from(&second);
        PredictorTable::from_parts(tokens.to_vec(), seqs.clone(), e, u.clone(), 0).ok()
    })?;
    let mut answer_tokens: Vec<String> = y1.iter().map(|&i| tokens[i].clone()).collect();
    answer_tokens.extend(y2.iter().map(|&i| tokens[i].clone()));
    Ok(SynthOutput {
        table,
        truth: PlantedTruth {
            spec: spec.clone(),
            k: d,
            queries: vec![q1, q2],
            contexts: ctx,
            gamma: None,
            affine: None,
            beta: Some(beta),
            tokens: answer_tokens,
        },
    })
}

fn tautology(spec: &SynthSpec, tokens: &[String], dim_g: usize, noise: bool) -> Result<SynthOutput, SynthError> {
    let (d, k, s) = (spec.d, spec.k, spec.s);
    let query = tokens[0].clone();
    let ctx = contexts(tokens, 1, s);
    let mut seqs = ctx.clone();
    seqs.push(query.clone());
    seqs.extend(ctx.iter().map(|c| format!("{c}{query}")));
    let table = with_retries(spec.seed, |rng| {
        let g_basis = random_orthonormal(rng, d, dim_g)?;
        let u = unembeddings_in(rng, k, &g_basis);
        let base = gaussian_matrix(rng, s, d);
        let answer = gaussian_vector(rng, d);
        let mut queried = DMatrix::from_fn(s, d, |_, j| answer[j]);
        if noise {
            let outside = DMatrix::identity(d, d) - &g_basis * g_basis.transpose();
            queried += gaussian_matrix(rng, s, d) * outside;
        }
        let mut e = DMatrix::zeros(2 * s + 1, d);
        e.rows_mut(0, s).copy_from(&base);
        e.set_row(s, &answer.transpose());
        e.rows_mut(s + 1, s).copy_from(&queried);
        PredictorTable::from_parts(tokens.to_vec(), seqs.clone(), e, u, 0).ok()
    })?;
    Ok(SynthOutput {
        table,
        truth: PlantedTruth {
            spec: spec.clone(),
            k: dim_g,
            queries: vec![query],
            contexts: ctx,
            gamma: None,
            affine: None,
            beta: None,
            tokens: Vec::new(),
        },
    })
}
