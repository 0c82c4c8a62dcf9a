use eqlin::equivalence::{
    compute_el_certificate, distributions_equal, generate_equivalent, verify_el_equivalence, Distortion, ElCertificate,
    EquivOptions, GeneratorOptions,
};
use eqlin::properties::{fit_relational_linearity, transfer_linearity};
use eqlin::synth::{random_model, Planted, SynthSpec};
use eqlin::{effective_geometry, load_model, save_model, TolPolicy};

#[test]
fn files_certificates_and_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let out = random_model(&SynthSpec::new(21, 5, 7, 12, Planted::ExactGlr { dim_g: 4, gamma_dim: 3, gamma_q_in_m: true })).unwrap();
    let a_path = dir.path().join("a.json");
    save_model(&out.table, &a_path).unwrap();
    let a = load_model(&a_path).unwrap();
    assert_eq!(a, out.table);

    let opts = EquivOptions::default();
    let gen = GeneratorOptions::new(8, 4).distortion(Distortion::cosine()).unembedding_noise(0.2);
    let (b, truth) = generate_equivalent(&a, &gen, &opts).unwrap();
    let b_path = dir.path().join("b.json");
    save_model(&b, &b_path).unwrap();
    let b = load_model(&b_path).unwrap();

    assert!(distributions_equal(&a, &b, 1e-8).unwrap().equal);
    assert_eq!(effective_geometry(&a, TolPolicy::default()).k, effective_geometry(&b, TolPolicy::default()).k);
    let parsed = ElCertificate::from_json(&truth.to_json(), b.dim()).unwrap();
    assert!(verify_el_equivalence(&a, &b, &parsed, &opts).unwrap().passed);
    let computed = compute_el_certificate(&a, &b, &opts).unwrap();
    assert!(computed.verdict);

    let gamma = out.truth.gamma_subspace().unwrap();
    let fit = fit_relational_linearity(&a, "t0", &gamma, None, 1e-6).unwrap().into_fit().unwrap();
    for cert in [&parsed, &computed] {
        let moved = transfer_linearity(&fit, cert, &a, &b, 1e-6).unwrap();
        assert!(moved.hypotheses.holds && moved.fit.valid);
        assert_eq!(moved.fit.gamma.dim(), gamma.dim());
    }
}
