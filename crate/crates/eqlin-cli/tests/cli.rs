use std::path::{Path, PathBuf};
use std::process::Command;

use eqlin::equivalence::{generate_equivalent, EquivOptions, GeneratorOptions};
use eqlin::synth::{nonidentifiable_pair, rank_one_model, random_model, Planted, SynthSpec};
use eqlin::{save_model, PredictorTable};
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
}

fn eqlin(args: &[&str], tol_env: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eqlin"));
    cmd.args(args).env_remove("EQLIN_TOL");
    if let Some(tol) = tol_env {
        cmd.env("EQLIN_TOL", tol);
    }
    let out = cmd.output().expect("binary runs");
    Run { code: out.status.code().unwrap_or(-1), stdout: String::from_utf8_lossy(&out.stdout).into_owned() }
}

fn json(args: &[&str]) -> (i32, Value) {
    let mut all = args.to_vec();
    all.push("--json");
    let run = eqlin(&all, None);
    (run.code, serde_json::from_str(&run.stdout).expect("JSON report"))
}

fn write(dir: &Path, name: &str, table: &PredictorTable) -> String {
    let path = dir.join(name);
    save_model(table, &path).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_csv(path: &PathBuf) -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r.iter().skip(1).map(|x| x.parse().unwrap()).collect())
        })
        .collect();
    (header, rows)
}

#[test]
fn inspect_reports_effective_complexity() {
    let dir = tempfile::tempdir().unwrap();
    let ex1 = write(dir.path(), "ex1.json", &rank_one_model());
    let (code, report) = json(&["inspect", &ex1]);
    assert_eq!(code, 0);
    assert_eq!(report["details"]["k"], 1);
    assert_eq!(report["details"]["diverse"], false);

    let diverse = random_model(&SynthSpec::new(1, 4, 6, 8, Planted::Diversity)).unwrap().table;
    let (_, report) = json(&["inspect", &write(dir.path(), "div.json", &diverse)]);
    assert_eq!(report["details"]["k"], 4);

    let low = random_model(&SynthSpec::new(2, 5, 6, 8, Planted::LowRank { dim_f: 4, dim_g: 3, dim_f_cap_g_perp: 2 })).unwrap().table;
    let (_, report) = json(&["inspect", &write(dir.path(), "low.json", &low)]);
    assert_eq!(report["details"]["k"], 2);
    assert_eq!(report["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn equiv_on_nonidentifiable_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = nonidentifiable_pair();
    let (pa, pb) = (write(dir.path(), "a.json", &a), write(dir.path(), "b.json", &b));
    let cert_path = dir.path().join("cert.json");
    let (code, report) = json(&["equiv", &pa, &pb, "--cert-out", cert_path.to_str().unwrap(), "--l-equiv"]);
    assert_eq!(code, 1);
    assert_eq!(report["verdicts"]["el_certificate"], true);
    assert_eq!(report["details"]["l_equivalence"], "absent");
    let cert: Value = serde_json::from_str(&std::fs::read_to_string(cert_path).unwrap()).unwrap();
    assert_eq!(cert["k"], 1);
    assert_eq!(cert["verdict"], true);
}

#[test]
fn equiv_names_worst_witness() {
    let dir = tempfile::tempdir().unwrap();
    let a = rank_one_model();
    let mut u = a.unembeddings().clone();
    u[(2, 0)] += 0.5;
    let b = PredictorTable::from_parts(a.tokens().to_vec(), a.sequences().to_vec(), a.embeddings().clone(), u, a.pivot()).unwrap();
    let (code, report) = json(&["equiv", &write(dir.path(), "a.json", &a), &write(dir.path(), "b.json", &b)]);
    assert_eq!(code, 1);
    assert_eq!(report["details"]["worst"]["token"], "c");
}

#[test]
fn make_equivalent_writes_model_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = nonidentifiable_pair();
    let pa = write(dir.path(), "a.json", &a);
    let out = dir.path().join("b.json");
    let (code, report) = json(&["make-equivalent", &pa, "--dim", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(report["details"]["dim"], 1);
    assert!(dir.path().join("b.cert.json").exists());
    let check = eqlin(&["equiv", &pa, out.to_str().unwrap(), "--certificate"], None);
    assert_eq!(check.code, 0);

    let cosine = dir.path().join("cos.json");
    assert_eq!(eqlin(&["make-equivalent", &pa, "--dim", "3", "--distortion", "cosine", "--out", cosine.to_str().unwrap()], None).code, 0);
    assert_eq!(eqlin(&["equiv", &pa, cosine.to_str().unwrap(), "--certificate"], None).code, 0);

    let run = eqlin(&["make-equivalent", &pa, "--dim", "0", "--out", out.to_str().unwrap()], None);
    assert_eq!(run.code, 2);
}

#[test]
fn property_commands() {
    let dir = tempfile::tempdir().unwrap();
    let glr = random_model(&SynthSpec::new(3, 5, 7, 10, Planted::ExactGlr { dim_g: 4, gamma_dim: 4, gamma_q_in_m: true })).unwrap().table;
    let pg = write(dir.path(), "glr.json", &glr);
    let (code, report) = json(&["prop", &pg, "linrep", "--query", "t0", "--witness", "t1,t2"]);
    assert_eq!(code, 0);
    assert_eq!(report["details"]["linrep"]["property"], "GLR");
    assert!(report["residuals"]["linrep"].as_f64().unwrap() < 1e-10);
    assert_eq!(report["verdicts"]["witness"], true);

    let (code, report) = json(&["prop", &pg, "probe", "--query", "t0", "--tokens", "t1,t2,t3"]);
    assert_eq!(code, 0);
    assert_eq!(report["details"]["probe"]["params"]["W"].as_array().unwrap().len(), 3);

    let parallel = random_model(&SynthSpec::new(4, 5, 6, 12, Planted::ParallelPair { beta: -1.5, dim_f: 3 })).unwrap().table;
    let (code, report) = json(&["prop", &write(dir.path(), "par.json", &parallel), "parallel", "--tokens", "t0,t1,t2,t3"]);
    assert_eq!(code, 0);
    assert!((report["details"]["parallel"]["params"]["beta"].as_f64().unwrap() + 1.5).abs() < 1e-8);

    let para = random_model(&SynthSpec::new(5, 4, 7, 9, Planted::Paraphrase { beta: 0.5, answers: 3 })).unwrap().table;
    let pp = write(dir.path(), "para.json", &para);
    let (code, _) = json(&["prop", &pp, "paraphrase", "--q1", "t0", "--answers1", "t0,t1,t2", "--q2", "t1", "--answers2", "t3,t4,t5"]);
    assert_eq!(code, 0);

    let taut = random_model(&SynthSpec::new(6, 4, 5, 6, Planted::Tautology { dim_g: 2, orthogonal_noise: true })).unwrap().table;
    assert_eq!(eqlin(&["prop", &write(dir.path(), "taut.json", &taut), "tautology", "--query", "t0"], None).code, 0);

    let (code, report) = json(&["prop", &pg, "linrep", "--query", "t0", "--contexts", "t1,t6t6"]);
    assert_eq!(code, 2);
    assert!(report["error"].as_str().unwrap().contains("t6t6"));
}

#[test]
fn verify_parallelism_on_equivalent_pair() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_model(&SynthSpec::new(8, 5, 6, 12, Planted::ParallelPair { beta: 2.0, dim_f: 3 })).unwrap().table;
    let (b, _) = generate_equivalent(&a, &GeneratorOptions::new(6, 1).unembedding_noise(0.5), &EquivOptions::default()).unwrap();
    let (code, report) = json(&["verify", &write(dir.path(), "a.json", &a), &write(dir.path(), "b.json", &b), "parallel", "--tokens", "t0,t1,t2,t3"]);
    assert_eq!(code, 0);
    assert_eq!(report["details"]["in_a"]["parallel"], true);
    assert!((report["details"]["independent_b"]["beta"].as_f64().unwrap() - 2.0).abs() < 1e-8);
}

#[test]
fn export_projection_views() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = nonidentifiable_pair();
    let pa = write(dir.path(), "a.json", &a);
    let m_csv = dir.path().join("m.csv");
    assert_eq!(eqlin(&["export-projection", &pa, "--onto", "M", "--out", m_csv.to_str().unwrap()], None).code, 0);
    let (header, rows) = read_csv(&m_csv);
    assert_eq!(header, vec!["id", "coord1"]);
    for (i, (id, coords)) in rows.iter().enumerate() {
        assert_eq!(id, &a.sequences()[i]);
        assert_eq!(coords.len(), 1);
        assert!((coords[0] - a.embeddings()[(i, 1)]).abs() < 1e-12);
    }

    let pca = dir.path().join("pca.csv");
    assert_eq!(eqlin(&["export-projection", &pa, "--onto", "pca2", "--out", pca.to_str().unwrap()], None).code, 0);
    let (header, rows) = read_csv(&pca);
    assert_eq!(header.len(), 3);
    for c in 0..2 {
        let mean = rows.iter().map(|(_, v)| v[c]).sum::<f64>() / rows.len() as f64;
        assert!(mean.abs() <= 1e-12, "column {c} mean {mean}");
    }

    let g_csv = dir.path().join("g.csv");
    assert_eq!(eqlin(&["export-projection", &pa, "--onto", "G", "--out", g_csv.to_str().unwrap()], None).code, 0);
    let text = std::fs::read_to_string(&g_csv).unwrap();
    let (_, rows) = read_csv(&g_csv);
    let mut rewritten = csv::Writer::from_writer(Vec::new());
    rewritten.write_record(["id", "coord1"]).unwrap();
    for (id, coords) in &rows {
        let record: Vec<String> = std::iter::once(id.clone()).chain(coords.iter().map(|x| x.to_string())).collect();
        rewritten.write_record(&record).unwrap();
    }
    assert_eq!(String::from_utf8(rewritten.into_inner().unwrap()).unwrap(), text);
}

#[test]
fn tolerance_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = nonidentifiable_pair();
    let (pa, pb) = (write(dir.path(), "a.json", &a), write(dir.path(), "b.json", &b));
    let run = eqlin(&["equiv", &pa, &pb, "--json"], Some("1e-3"));
    let report: Value = serde_json::from_str(&run.stdout).unwrap();
    assert_eq!(report["tolerances"]["comparison"], 1e-3);
    let run = eqlin(&["equiv", &pa, &pb, "--json", "--tol", "1e-5"], Some("1e-3"));
    let report: Value = serde_json::from_str(&run.stdout).unwrap();
    assert_eq!(report["tolerances"]["comparison"], 1e-5);
}

#[test]
fn reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let pa = write(dir.path(), "a.json", &rank_one_model());
    let strip = |run: Run| {
        let mut v: Value = serde_json::from_str(&run.stdout).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_ms");
        v
    };
    let first = strip(eqlin(&["inspect", &pa, "--json"], None));
    let second = strip(eqlin(&["inspect", &pa, "--json"], None));
    assert_eq!(first, second);
    let text = eqlin(&["inspect", &pa], None).stdout;
    assert!(text.contains("k: 1") && text.contains("verdict dimension_formula: PASS"));
}
