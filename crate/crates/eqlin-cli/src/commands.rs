use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use eqlin::equivalence::{
    check_l_equivalence, check_structure, compute_el_certificate, distributions_equal, generate_equivalent,
    verify_el_equivalence, Distortion, ElCertificate, EquivError, EquivOptions, GeneratorOptions,
};
use eqlin::properties::{
    check_probe, fit_relational_linearity, logratio_parallelism_check, ls_witness, paraphrase_check, parallel_in,
    probe_params, steering_vector, tautology_check, transfer_linearity, transfer_parallelism, LinearRepFit,
    PropertyKind, PropertyReport, RelationalLinearity, Steering,
};
use eqlin::subspace::principal_axes;
use eqlin::synth::{nonidentifiable_pair, rank_one_model, random_model, Planted, SynthSpec};
use eqlin::{effective_geometry, PredictorTable, TolPolicy};
use nalgebra::DMatrix;
use serde_json::json;

use crate::report::RunReport;
use crate::selectors::{gamma_subspace, split_list, token_indices};
use crate::{Cli, Command, DistortionArg, Onto, PropCommand, VerifyCommand, DEFAULT_TOL};

struct Settings {
    tol: f64,
    policy: TolPolicy,
}

impl Settings {
    fn from_cli(cli: &Cli) -> Result<Self> {
        let tol = cli.common.tol.unwrap_or(DEFAULT_TOL);
        if !(tol.is_finite() && tol > 0.0) {
            bail!("tolerance must be a positive finite number, got {tol}");
        }
        let rank_tol = cli.common.rank_tol;
        if !(rank_tol.is_finite() && rank_tol > 0.0) {
            bail!("rank tolerance must be a positive finite number, got {rank_tol}");
        }
        Ok(Settings { tol, policy: TolPolicy::Relative(rank_tol) })
    }

    fn options(&self) -> EquivOptions {
        EquivOptions { tol: self.tol, policy: self.policy }
    }

    fn record(&self, report: &mut RunReport) {
        report.tol("comparison", self.tol);
        report.tol("rank", self.policy.value());
    }
}

pub fn run(cli: &Cli) -> Result<RunReport> {
    let settings = Settings::from_cli(cli)?;
    match &cli.command {
        Command::Inspect { model } => inspect(model, &settings),
        Command::Equiv { model_a, model_b, check: _, certificate, cert_out, l_equiv } => {
            equiv(model_a, model_b, *certificate || cert_out.is_some(), cert_out.as_deref(), *l_equiv, &settings)
        }
        Command::MakeEquivalent { model, dim, distortion, strength, noise, seed, out, cert_out } => {
            let distortion = distortion_from(*distortion, *strength)?;
            let gen = GeneratorOptions::new(*dim, *seed).distortion(distortion).unembedding_noise(*noise);
            let cert_path = cert_out.clone().unwrap_or_else(|| out.with_extension("cert.json"));
            make_equivalent(model, &gen, out, &cert_path, &settings)
        }
        Command::Prop { model, property } => prop(model, property, &settings),
        Command::Verify { model_a, model_b, cert, property } => verify(model_a, model_b, cert.as_deref(), property, &settings),
        Command::ExportProjection { model, onto, out } => export_projection(model, *onto, out, &settings),
        Command::Synth { plant, seed, d, k, s, out } => synth(plant, SynthSpec::new(*seed, *d, *k, *s, Planted::None), out),
    }
}

fn inspect(path: &Path, settings: &Settings) -> Result<RunReport> {
    let mut report = RunReport::new("inspect");
    let table = report.load_model(path)?;
    let geo = effective_geometry(&table, settings.policy);
    report.tol("rank", settings.policy.value());
    report.detail("dim", table.dim());
    report.detail("K", table.num_tokens());
    report.detail("S", table.num_sequences());
    report.detail("dimF", geo.f.dim());
    report.detail("dimG", geo.g.dim());
    report.detail("dimF_cap_Gperp", geo.f_cap_g_perp);
    report.detail("k", geo.k);
    report.detail("diverse", geo.diverse());
    report.verdict("dimension_formula", geo.dimension_formula_holds());
    Ok(report)
}

fn structural(err: EquivError) -> anyhow::Error {
    anyhow!(err)
}

fn equiv(a_path: &Path, b_path: &Path, certificate: bool, cert_out: Option<&Path>, l_equiv: bool, settings: &Settings) -> Result<RunReport> {
    let mut report = RunReport::new("equiv");
    let a = report.load_model(a_path)?;
    let b = report.load_model(b_path)?;
    settings.record(&mut report);
    check_structure(&a, &b).map_err(structural)?;
    let opts = settings.options();

    let dist = distributions_equal(&a, &b, settings.tol).map_err(structural)?;
    report.verdict("distribution_equal", dist.equal);
    report.residual("max_logit_gap", dist.max_logit_gap);
    report.residual("max_prob_gap", dist.max_prob_gap);
    if let Some((sequence, token)) = &dist.worst {
        report.detail("worst", json!({ "sequence": sequence, "token": token }));
    }

    if certificate {
        let cert = compute_el_certificate(&a, &b, &opts).map_err(structural)?;
        let verification = verify_el_equivalence(&a, &b, &cert, &opts).map_err(structural)?;
        report.detail("k", cert.k);
        report.residual("certificate_f", cert.residual_f);
        report.residual("certificate_g", cert.residual_g);
        report.residual("certificate_compat", cert.residual_compat);
        report.verdict("el_certificate", cert.verdict);
        report.verdict("el_verification", verification.passed);
        let failed: Vec<_> = verification.failed().map(|c| json!({ "check": c.name, "value": c.value, "threshold": c.threshold })).collect();
        if !failed.is_empty() {
            report.detail("failed_checks", failed);
        }
        if let Some(path) = cert_out {
            report.write_output(path, cert.to_json().as_bytes())?;
        }
    }

    if l_equiv {
        let l = check_l_equivalence(&a, &b, &opts).map_err(structural)?;
        report.verdict("l_equivalent", l.matrix.is_some());
        report.detail("l_equivalence", if l.matrix.is_some() { "present" } else { "absent" });
        report.detail("diverse", l.diverse);
        report.residual("l_equivalence_f", l.residual_f);
        report.residual("l_equivalence_g", l.residual_g);
    }
    Ok(report)
}

fn distortion_from(arg: DistortionArg, strength: Option<f64>) -> Result<Distortion> {
    if let Some(s) = strength {
        if !s.is_finite() {
            bail!("distortion strength must be finite");
        }
    }
    Ok(match arg {
        DistortionArg::None => Distortion::None,
        DistortionArg::Linear => Distortion::Linear { scale: strength.unwrap_or(0.5) },
        DistortionArg::Cosine => match Distortion::cosine() {
            Distortion::Cosine { amplitude, frequency } => Distortion::Cosine { amplitude: strength.unwrap_or(amplitude), frequency },
            other => other,
        },
        DistortionArg::Square => Distortion::Square { scale: strength.unwrap_or(1.0) },
    })
}

fn make_equivalent(path: &Path, gen: &GeneratorOptions, out: &Path, cert_path: &Path, settings: &Settings) -> Result<RunReport> {
    let mut report = RunReport::new("make-equivalent");
    let a = report.load_model(path)?;
    settings.record(&mut report);
    let (b, cert) = generate_equivalent(&a, gen, &settings.options()).map_err(|err| match err {
        EquivError::TargetDimTooSmall { target, k } => anyhow!("--dim {target} is below the effective complexity k = {k}"),
        other => anyhow!(other),
    })?;
    report.write_output(out, b.to_json().as_bytes())?;
    report.write_output(cert_path, cert.to_json().as_bytes())?;
    report.detail("k", cert.k);
    report.detail("dim", b.dim());
    report.detail("seed", gen.seed);
    report.detail("distortion", gen.distortion);
    report.residual("certificate_f", cert.residual_f);
    report.residual("certificate_g", cert.residual_g);
    report.residual("certificate_compat", cert.residual_compat);
    report.verdict("ground_truth_certificate", cert.verdict);
    Ok(report)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn record_property(report: &mut RunReport, name: &str, property: PropertyReport) {
    report.verdict(name, property.verdict);
    report.residual(name, property.residual);
    report.detail(name, property);
}

fn linrep_params(fit: &LinearRepFit) -> serde_json::Value {
    json!({
        "query": fit.query,
        "dim_gamma": fit.gamma.dim(),
        "dim_gamma_q": fit.gamma_q.dim(),
        "contexts": fit.pairs.len(),
        "threshold": fit.threshold,
        "rank_deficient": fit.rank_deficient,
        "A": matrix_rows(&fit.a_map),
        "a": fit.offset.iter().copied().collect::<Vec<_>>(),
    })
}

fn fit_or_trivial(report: &mut RunReport, name: &str, outcome: RelationalLinearity) -> Option<LinearRepFit> {
    match outcome {
        RelationalLinearity::Fitted(fit) => {
            record_property(report, name, PropertyReport { property: PropertyKind::Glr, verdict: fit.valid, residual: fit.residual, params: linrep_params(&fit) });
            Some(*fit)
        }
        RelationalLinearity::Trivial { gamma_dim, overlap_with_n } => {
            let params = json!({ "trivial": true, "dim_gamma": gamma_dim, "overlap_with_n": overlap_with_n });
            record_property(report, name, PropertyReport { property: PropertyKind::Glr, verdict: true, residual: 0.0, params });
            None
        }
    }
}

fn require_fit(table: &PredictorTable, query: &str, gamma: &str, settings: &Settings, report: &mut RunReport) -> Result<LinearRepFit> {
    let subspace = gamma_subspace(table, gamma, settings.policy, report)?;
    match fit_relational_linearity(table, query, &subspace, None, settings.tol)? {
        RelationalLinearity::Fitted(fit) => Ok(*fit),
        RelationalLinearity::Trivial { .. } => bail!("Γ is orthogonal to N, so the query carries no information on Γ"),
    }
}

fn prop(path: &Path, command: &PropCommand, settings: &Settings) -> Result<RunReport> {
    let mut report = RunReport::new("prop");
    let table = report.load_model(path)?;
    settings.record(&mut report);
    let tol = settings.tol;
    match command {
        PropCommand::Parallel { tokens } => {
            let ids = token_indices(&table, tokens)?;
            let quad: [usize; 4] = ids.try_into().map_err(|v: Vec<usize>| anyhow!("expected four tokens, got {}", v.len()))?;
            let r = logratio_parallelism_check(&table, quad, tol)?;
            let params = json!({ "beta": r.beta, "geometric": r.geometric, "ratio_beta": r.ratio_beta, "ratio_residual": r.ratio_residual });
            record_property(&mut report, "parallel", PropertyReport { property: PropertyKind::Parallel, verdict: r.geometric.parallel, residual: r.geometric.residual, params });
        }
        PropCommand::Linrep { query, gamma, contexts, witness } => {
            let subspace = gamma_subspace(&table, gamma, settings.policy, &mut report)?;
            let contexts = contexts.as_deref().map(split_list);
            let outcome = fit_relational_linearity(&table, query, &subspace, contexts.as_deref(), tol)?;
            let fit = fit_or_trivial(&mut report, "linrep", outcome);
            if let Some(pair) = witness {
                let ids = token_indices(&table, pair)?;
                let [yi, yj] = ids[..] else { bail!("--witness expects two tokens") };
                let fit = fit.ok_or_else(|| anyhow!("no fitted map to build a witness from"))?;
                let w = ls_witness(&fit, &table, yi, yj, tol)?;
                let params = json!({ "gamma": w.gamma, "threshold": w.threshold });
                record_property(&mut report, "witness", PropertyReport { property: PropertyKind::Ls, verdict: w.passed, residual: w.identity_gap, params });
            }
        }
        PropCommand::Probe { query, gamma, tokens } => {
            let fit = require_fit(&table, query, gamma, settings, &mut report)?;
            report.verdict("linrep", fit.valid);
            let ids = token_indices(&table, tokens)?;
            let probe = probe_params(&fit, &table, &ids, tol)?;
            let check = check_probe(&table, query, &probe, tol)?;
            let params = json!({ "W": probe.w, "b": probe.b, "tokens": split_list(tokens) });
            record_property(&mut report, "probe", PropertyReport { property: PropertyKind::Lp, verdict: check.passed, residual: check.max_gap, params });
        }
        PropCommand::Steer { query, others, gamma } => {
            let fit0 = require_fit(&table, query, gamma, settings, &mut report)?;
            let rest = split_list(others)
                .iter()
                .map(|q| require_fit(&table, q, gamma, settings, &mut report))
                .collect::<Result<Vec<_>>>()?;
            let (verdict, residual, params) = match steering_vector(&fit0, &rest)? {
                Steering::Found { v, effect, leak } => (true, leak, json!({ "v": v.iter().copied().collect::<Vec<_>>(), "effect": effect, "leak": leak })),
                Steering::Absent { dim_gamma_q0, dim_overlap } => (false, f64::NAN, json!({ "dim_gamma_q0": dim_gamma_q0, "dim_overlap": dim_overlap })),
            };
            record_property(&mut report, "steer", PropertyReport { property: PropertyKind::Steer, verdict, residual, params });
        }
        PropCommand::Paraphrase { q1, answers1, q2, answers2 } => {
            let y1 = token_indices(&table, answers1)?;
            let y2 = token_indices(&table, answers2)?;
            let r = paraphrase_check(&table, q1, &y1, q2, &y2, tol)?;
            let params = json!({
                "beta": r.beta,
                "spread": r.spread,
                "dim_gamma1": r.dim_gamma1,
                "dim_gamma2": r.dim_gamma2,
                "identity_residual": r.identity_residual,
                "O": r.omat.as_ref().map(matrix_rows),
            });
            record_property(&mut report, "paraphrase", PropertyReport { property: PropertyKind::Para, verdict: r.paraphrase, residual: r.residual, params });
        }
        PropCommand::Tautology { query } => {
            let r = tautology_check(&table, query, tol)?;
            let params = json!({
                "threshold": r.threshold,
                "projection_residual": r.projection_residual,
                "a_q": r.a_q.as_ref().map(|v| v.iter().copied().collect::<Vec<_>>()),
            });
            record_property(&mut report, "tautology", PropertyReport { property: PropertyKind::Taut, verdict: r.tautology, residual: r.max_gap, params });
        }
    }
    Ok(report)
}

fn verify(a_path: &Path, b_path: &Path, cert_path: Option<&Path>, command: &VerifyCommand, settings: &Settings) -> Result<RunReport> {
    let mut report = RunReport::new("verify");
    let a = report.load_model(a_path)?;
    let b = report.load_model(b_path)?;
    settings.record(&mut report);
    check_structure(&a, &b).map_err(structural)?;
    let opts = settings.options();
    let tol = settings.tol;
    let dist = distributions_equal(&a, &b, tol).map_err(structural)?;
    report.verdict("distribution_equal", dist.equal);
    report.residual("max_logit_gap", dist.max_logit_gap);
    if !dist.equal {
        report.detail("status", "not_equivalent");
        return Ok(report);
    }
    let cert = match cert_path {
        Some(path) => {
            let bytes = report.read_input(path)?;
            let text = std::str::from_utf8(&bytes).context("certificate is not UTF-8")?;
            ElCertificate::from_json(text, b.dim()).map_err(structural)?
        }
        None => compute_el_certificate(&a, &b, &opts).map_err(structural)?,
    };
    let verification = verify_el_equivalence(&a, &b, &cert, &opts).map_err(structural)?;
    report.verdict("certificate", verification.passed);

    match command {
        VerifyCommand::Linrep { query, gamma } => {
            let subspace = gamma_subspace(&a, gamma, settings.policy, &mut report)?;
            let Some(fit_a) = fit_or_trivial(&mut report, "linrep_a", fit_relational_linearity(&a, query, &subspace, None, tol)?) else {
                report.detail("status", "trivial");
                return Ok(report);
            };
            let moved = transfer_linearity(&fit_a, &cert, &a, &b, tol)?;
            report.detail("hypotheses", moved.hypotheses);
            report.residual("transferred", moved.fit.residual);
            let refit = fit_relational_linearity(&b, query, &moved.fit.gamma, None, tol)?;
            let holds_b = match &refit {
                RelationalLinearity::Fitted(fit) => fit.valid,
                RelationalLinearity::Trivial { .. } => true,
            };
            fit_or_trivial(&mut report, "linrep_b", refit);
            if !moved.hypotheses.holds {
                report.detail("status", "not_applicable");
                report.verdict("applicable", false);
            } else {
                let agree = fit_a.valid == holds_b && (!fit_a.valid || moved.fit.valid);
                report.detail("status", if agree { "all_or_none_holds" } else { "all_or_none_violated" });
                report.verdict("all_or_none", agree);
            }
        }
        VerifyCommand::Parallel { tokens } => {
            let ids = token_indices(&a, tokens)?;
            let [y0, y1, y2, y3] = ids[..] else { bail!("expected four tokens") };
            let diff = |t: &PredictorTable, i: usize, j: usize| t.unembedding(j) - t.unembedding(i);
            let moved = transfer_parallelism(&diff(&a, y0, y1), &diff(&a, y2, y3), &cert, &a, &b, tol)?;
            let own_b = parallel_in(&diff(&b, y0, y1), &diff(&b, y2, y3), &effective_geometry(&b, settings.policy).n, tol)?;
            let independent = moved.in_a.parallel == own_b.parallel
                && match (moved.in_a.beta, own_b.beta, own_b.parallel) {
                    (Some(x), Some(y), true) => (x - y).abs() <= tol * 1f64.max(x.abs()),
                    _ => true,
                };
            report.detail("in_a", moved.in_a);
            report.detail("transferred", moved.in_b);
            report.detail("independent_b", own_b);
            report.verdict("transfer_agrees", moved.agree);
            report.verdict("independent_agrees", independent);
            report.detail("status", if moved.agree && independent { "all_or_none_holds" } else { "all_or_none_violated" });
        }
    }
    Ok(report)
}

fn export_projection(path: &Path, onto: Onto, out: &Path, settings: &Settings) -> Result<RunReport> {
    let mut report = RunReport::new("export-projection");
    let table = report.load_model(path)?;
    report.tol("rank", settings.policy.value());
    let geo = effective_geometry(&table, settings.policy);
    let (ids, coords) = match onto {
        Onto::M => (table.sequences().to_vec(), table.embeddings() * geo.m.basis()),
        Onto::N => (table.tokens().to_vec(), table.pivot_differences().into_rows() * geo.n.basis()),
        Onto::G => (table.tokens().to_vec(), table.pivot_differences().into_rows() * geo.g.basis()),
        Onto::Pca2 => {
            let e = table.embeddings();
            let mean = e.row_mean();
            let mut centered = e.clone();
            for mut row in centered.row_iter_mut() {
                row -= &mean;
            }
            let axes = principal_axes(&centered, 2);
            (table.sequences().to_vec(), centered * axes)
        }
    };
    let mut writer = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("id".to_string()).chain((1..=coords.ncols()).map(|c| format!("coord{c}"))).collect();
    writer.write_record(&header)?;
    for (id, row) in ids.iter().zip(coords.row_iter()) {
        let record: Vec<String> = std::iter::once(id.clone()).chain(row.iter().map(|x| x.to_string())).collect();
        writer.write_record(&record)?;
    }
    let bytes = writer.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?;
    report.write_output(out, &bytes)?;
    let name = match onto {
        Onto::M => "M",
        Onto::N => "N",
        Onto::G => "G",
        Onto::Pca2 => "pca2",
    };
    report.detail("onto", name);
    report.detail("rows", ids.len());
    report.detail("columns", coords.ncols());
    Ok(report)
}

fn parse_numbers(args: &str, count: usize, plant: &str) -> Result<Vec<f64>> {
    let values = split_list(args)
        .iter()
        .map(|x| x.parse::<f64>().with_context(|| format!("bad number {x:?} in plant {plant:?}")))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != count {
        bail!("plant {plant:?} takes {count} parameters, got {}", values.len());
    }
    Ok(values)
}

fn synth(plant: &str, mut spec: SynthSpec, out: &Path) -> Result<RunReport> {
    let mut report = RunReport::new("synth");
    let (name, args) = plant.split_once(':').unwrap_or((plant, ""));
    let fixed = match name {
        "rank-one" => Some(rank_one_model()),
        "pair-a" => Some(nonidentifiable_pair().0),
        "pair-b" => Some(nonidentifiable_pair().1),
        _ => None,
    };
    if let Some(table) = fixed {
        report.write_output(out, table.to_json().as_bytes())?;
        report.detail("plant", name);
        return Ok(report);
    }
    let n = |count| parse_numbers(args, count, plant);
    let as_usize = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(anyhow!("expected a non-negative integer, got {x}"))
        }
    };
    spec.planted = match name {
        "none" => Planted::None,
        "diversity" => Planted::Diversity,
        "low-rank" => {
            let v = n(3)?;
            Planted::LowRank { dim_f: as_usize(v[0])?, dim_g: as_usize(v[1])?, dim_f_cap_g_perp: as_usize(v[2])? }
        }
        "glr" => {
            let v = n(3)?;
            Planted::ExactGlr { dim_g: as_usize(v[0])?, gamma_dim: as_usize(v[1])?, gamma_q_in_m: v[2] != 0.0 }
        }
        "parallel" => {
            let v = n(2)?;
            Planted::ParallelPair { beta: v[0], dim_f: as_usize(v[1])? }
        }
        "paraphrase" => {
            let v = n(2)?;
            Planted::Paraphrase { beta: v[0], answers: as_usize(v[1])? }
        }
        "tautology" => {
            let v = n(2)?;
            Planted::Tautology { dim_g: as_usize(v[0])?, orthogonal_noise: v[1] != 0.0 }
        }
        other => bail!("unknown plant {other:?}"),
    };
    let output = random_model(&spec)?;
    report.write_output(out, output.table.to_json().as_bytes())?;
    let truth_path: PathBuf = out.with_extension("truth.json");
    report.write_output(&truth_path, output.truth.to_json().as_bytes())?;
    report.detail("plant", name);
    report.detail("seed", spec.seed);
    report.detail("k", output.truth.k);
    Ok(report)
}
