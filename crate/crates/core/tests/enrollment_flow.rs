use std::net::{SocketAddr, TcpListener};

use trustplane::attestation_agent::LocalEndpoint;
use trustplane::enclave_tls::{CipherPolicy, EnclaveError};
use trustplane::enrollment::{run_enrollment, run_enrollment_with, EnrollmentOptions, EnrollmentState, FailureReason, Stage, Tamper};
use trustplane::extended_ca::RejectionReason;
use trustplane::pki;
use trustplane::platform::HostManifest;
use trustplane::sdn_harness::{Deployment, DeploymentConfig};

fn deployment(host_manifest: HostManifest) -> Deployment {
    Deployment::start(&DeploymentConfig {
        seed: Some("enrollment-flow".into()),
        host_manifest,
        ..DeploymentConfig::default()
    })
    .unwrap()
}

fn dead_addr() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let a = l.local_addr().unwrap();
    drop(l);
    a
}

#[test]
fn clean_host_enrolls_with_full_state_path() {
    let d = deployment(HostManifest::reference());
    let c = d.new_compartment("vnf-1", false);
    let s = run_enrollment(d.ca_addr(), d.agent_endpoint(), &c);
    assert_eq!(s.state(), EnrollmentState::Enrolled, "{}", s.describe());
    use EnrollmentState::*;
    assert_eq!(s.history(), &[Init, NonceReceived, EvidenceCollected, Keyed, Submitted, Enrolled]);

    // The nonce sent to the agent is the one the CA issued.
    let nonce = *s.nonce().unwrap();
    assert_eq!(s.evidence().unwrap().0.nonce, nonce);
    assert!(d.ca().nonce_record(&nonce).unwrap().consumed);

    let cert = c.certificate().unwrap();
    assert!(pki::chains_to(&cert, &d.root_certificate()));
    assert_eq!(cert.to_der().unwrap(), s.certificate().unwrap());

    let t = s.stage_timings().unwrap();
    for stage in Stage::ALL {
        assert!(t[&stage].as_nanos() > 0, "{stage:?}");
    }
    let max = t.values().max().unwrap();
    assert_eq!(t[&Stage::Total], *max);
    let parts: std::time::Duration = [Stage::Nonce, Stage::TpmQuote, Stage::KeyGeneration, Stage::CsrSigning]
        .iter()
        .map(|s| t[s])
        .sum();
    assert!(t[&Stage::Total] >= parts);
}

#[test]
fn tampered_binary_is_rejected_and_leaves_no_credential() {
    let tampered = HostManifest::reference().with_tampered("/usr/sbin/ovs-vswitchd").unwrap();
    let d = deployment(tampered);
    let c = d.new_compartment("ovs", false);
    let err = c
        .library_init(d.ca_addr(), d.agent_endpoint(), CipherPolicy::compatible())
        .unwrap_err();
    let EnclaveError::InitFailed(session) = err else {
        panic!("unexpected error {err}");
    };
    assert_eq!(session.rejection(), Some(RejectionReason::UnknownMeasurement));
    assert!(!c.is_initialized());
    assert!(c.certificate().is_none());
    // A failed session leaves the compartment re-initializable.
    let again = run_enrollment(d.ca_addr(), d.agent_endpoint(), &c);
    assert_eq!(again.rejection(), Some(RejectionReason::UnknownMeasurement));
}

#[test]
fn second_init_is_refused() {
    let d = deployment(HostManifest::reference());
    let c = d.new_compartment("ovs", false);
    let report = c.library_init(d.ca_addr(), d.agent_endpoint(), CipherPolicy::compatible()).unwrap();
    assert!(report.elapsed.as_nanos() > 0);
    assert!(matches!(
        c.library_init(d.ca_addr(), d.agent_endpoint(), CipherPolicy::compatible()),
        Err(EnclaveError::AlreadyInitialized)
    ));
}

#[test]
fn client_side_tampering_maps_to_rejections() {
    let d = deployment(HostManifest::reference());
    let cases = [
        (Tamper::QuoteSignature, RejectionReason::QuoteSig),
        (Tamper::NonceReplay, RejectionReason::Nonce),
        (Tamper::Csr, RejectionReason::BadCsr),
    ];
    for (tamper, expected) in cases {
        let c = d.new_compartment("vnf", false);
        let s = run_enrollment_with(d.ca_addr(), d.agent_endpoint(), &c, &EnrollmentOptions { tamper });
        assert_eq!(s.rejection(), Some(expected), "{tamper}: {}", s.describe());
        assert_eq!(s.failure().unwrap().attempted, EnrollmentState::Enrolled);
        assert!(!c.is_initialized());
    }
}

#[test]
fn missing_required_file_is_rejected() {
    let d = deployment(HostManifest::reference().without("/usr/lib/libenclave-tls.so"));
    let c = d.new_compartment("vnf", false);
    let s = run_enrollment(d.ca_addr(), d.agent_endpoint(), &c);
    assert_eq!(s.rejection(), Some(RejectionReason::MissingRequired));
}

#[test]
fn unreachable_services() {
    let d = deployment(HostManifest::reference());
    let c = d.new_compartment("vnf", false);

    let s = run_enrollment(dead_addr(), d.agent_endpoint(), &c);
    assert_eq!(s.state(), EnrollmentState::Failed);
    assert_eq!(s.failure().unwrap().attempted, EnrollmentState::NonceReceived);
    assert!(matches!(s.failure().unwrap().reason, FailureReason::CaUnreachable(_)));

    let agent = LocalEndpoint::loopback(dead_addr()).unwrap();
    let s = run_enrollment(d.ca_addr(), &agent, &c);
    assert_eq!(s.failure().unwrap().attempted, EnrollmentState::EvidenceCollected);
    assert!(matches!(s.failure().unwrap().reason, FailureReason::AgentUnreachable(_)));
    assert!(s.stage_timings().unwrap().contains_key(&Stage::Total));
    assert!(!c.is_initialized());

    let ok = run_enrollment(d.ca_addr(), d.agent_endpoint(), &c);
    assert!(ok.is_enrolled());
}

#[test]
fn concurrent_compartments_enroll_against_one_ca() {
    let d = deployment(HostManifest::reference());
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let d = &d;
                s.spawn(move || {
                    let c = d.new_compartment(&format!("vnf-{i}"), false);
                    run_enrollment(d.ca_addr(), d.agent_endpoint(), &c).is_enrolled()
                })
            })
            .collect();
        assert!(handles.into_iter().all(|h| h.join().unwrap()));
    });
}
