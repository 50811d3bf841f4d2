//! End-to-end negotiation on small interconnections: every algorithm, the
//! independent certificate check, tamper detection and the certificate text
//! round trip.

use agcv_core::contracts::Verdict;
use agcv_core::model::{certificate_from_text, certificate_to_text, parse_model, ConfigFile, Model};
use agcv_core::negotiation::{check_certificate, evidence_mut, run, Algorithm, CheckFailure, NegotiationError};

fn node(id: u32, rate: &str, inputs: &[u32]) -> String {
    let mut s = format!(
        "[subsystem.{id}]\nstates = [\"x{id}\"]\ndynamics = [\"{rate}\"]\noutput_vars = [\"x{id}\"]\noutput_map = [\"x{id}\"]\n\
         initial_set = [\"0.25 - x{id}^2\"]\nsafe_region = [\"1 - x{id}^2\"]\n\n"
    );
    for p in inputs {
        s.push_str(&format!("[subsystem.{id}.input_bounds.{p}]\nvars = [\"x{p}\"]\nbound = [\"1 - x{p}^2\"]\n\n"));
    }
    s
}

fn model(nodes: &[(u32, &str, &[u32])]) -> Model {
    let names: Vec<String> = nodes.iter().map(|(id, _, _)| format!("\"x{id}\"")).collect();
    let mut text = format!("[meta]\nname = \"small\"\n\n[variables]\nnames = [{}]\n\n", names.join(", "));
    let mut edges = Vec::new();
    for (id, rate, inputs) in nodes {
        text.push_str(&node(*id, rate, inputs));
        edges.extend(inputs.iter().map(|p| format!("\"{p} -> {id}\"")));
    }
    text.push_str(&format!("[edges]\nlist = [{}]\n", edges.join(", ")));
    parse_model(&text).expect("model parses")
}

fn cascade() -> Model {
    model(&[(1, "-x1", &[]), (2, "-x2 + 0.2*x1", &[1]), (3, "-x3 + 0.2*x2", &[2])])
}

fn ring() -> Model {
    model(&[(1, "-x1 + 0.1*x2", &[2]), (2, "-x2 + 0.1*x1", &[1])])
}

fn mixed() -> Model {
    // A two-node loop feeding a downstream node with different dynamics.
    model(&[(1, "-x1 + 0.1*x2", &[2]), (2, "-x2 + 0.1*x1", &[1]), (3, "-2*x3 + 0.1*x1", &[1])])
}

#[test]
fn cascade_is_verified_and_checks() {
    let m = cascade();
    let cert = run(&m.interconnection, &m.config).unwrap();
    assert_eq!(cert.verdict, Verdict::True, "{:?}", cert.reason);
    assert_eq!(cert.algorithm, "acyclic");
    assert_eq!(cert.contracts.len(), 3);
    let report = check_certificate(&m.interconnection, &cert, &m.config).unwrap();
    assert_eq!(report.contracts_checked, 3);
    assert_eq!(report.edges_checked, 2);
    assert!(report.min_sample_margin >= -1e-6);
}

#[test]
fn ring_uses_the_homogeneous_algorithm() {
    let m = ring();
    let cert = run(&m.interconnection, &m.config).unwrap();
    assert_eq!(cert.algorithm, "homogeneous");
    assert_eq!(cert.verdict, Verdict::True, "{:?}", cert.reason);
    // Both contracts come from the same representative program.
    let (c1, c2) = (&cert.contracts[&1], &cert.contracts[&2]);
    assert_eq!(c1.delta, c2.delta);
    assert_eq!(c1.zeta, c2.zeta);
    check_certificate(&m.interconnection, &cert, &m.config).unwrap();
}

#[test]
fn mixed_graph_uses_the_general_algorithm() {
    let m = mixed();
    let cert = run(&m.interconnection, &m.config).unwrap();
    assert_eq!(cert.algorithm, "general");
    assert_eq!(cert.verdict, Verdict::True, "{:?}", cert.reason);
    check_certificate(&m.interconnection, &cert, &m.config).unwrap();
}

#[test]
fn requesting_a_mismatched_algorithm_is_an_error() {
    let m = ring();
    let mut cfg = m.config.clone();
    cfg.algorithm = Algorithm::Acyclic;
    assert!(matches!(run(&m.interconnection, &cfg), Err(NegotiationError::Mismatch { .. })));
    let m = mixed();
    let mut cfg = m.config.clone();
    cfg.algorithm = Algorithm::Homogeneous;
    assert!(matches!(run(&m.interconnection, &cfg), Err(NegotiationError::Mismatch { .. })));
}

#[test]
fn tampered_gram_matrix_fails_the_check() {
    let m = cascade();
    let mut cert = run(&m.interconnection, &m.config).unwrap();
    let evidence = evidence_mut(&mut cert, 2).unwrap();
    let gram = evidence.grams.values_mut().next().unwrap();
    gram.matrix[(0, 0)] += 1e-2;
    match check_certificate(&m.interconnection, &cert, &m.config) {
        Err(CheckFailure::Contract { node, .. }) => assert_eq!(node, 2),
        other => panic!("expected a contract failure, got {other:?}"),
    }
}

#[test]
fn tampered_barrier_fails_the_check() {
    let m = cascade();
    let mut cert = run(&m.interconnection, &m.config).unwrap();
    let c = cert.contracts.get_mut(&3).unwrap();
    c.barrier = c.barrier.add(&agcv_core::poly::Polynomial::constant(0.5));
    assert!(check_certificate(&m.interconnection, &cert, &m.config).is_err());
}

#[test]
fn certificate_text_round_trips() {
    let m = ring();
    let cert = run(&m.interconnection, &m.config).unwrap();
    let cfg = ConfigFile::effective(&m.config, m.sim_tol);
    let text = certificate_to_text(&cert, &m.interconnection, &m.sha256, &cfg);
    let loaded = certificate_from_text(&text, &m.interconnection).unwrap();
    assert_eq!(loaded.model_sha256, m.sha256);
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.certificate.verdict, cert.verdict);
    assert_eq!(loaded.certificate.contracts, cert.contracts);
    assert_eq!(certificate_to_text(&loaded.certificate, &m.interconnection, &m.sha256, &loaded.config), text);
    check_certificate(&m.interconnection, &loaded.certificate, &m.config).unwrap();
}
