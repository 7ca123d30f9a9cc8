use trustplane::enclave_tls::{BoundaryCapture, CipherPolicy, EcallKind};
use trustplane::sdn_harness::bench::{format_ecalls, format_latency, run_latency_benchmark, ECALL_COLUMNS};
use trustplane::sdn_harness::openflow::OFPT_FLOW_MOD;
use trustplane::sdn_harness::{Datapath, DatapathConfig, Deployment, DeploymentConfig, HarnessError};

fn deployment() -> Deployment {
    Deployment::start(&DeploymentConfig {
        seed: Some("datapath".into()),
        ..DeploymentConfig::default()
    })
    .unwrap()
}

#[test]
fn echo_path_round_trips_and_learns() {
    let d = deployment();
    let capture = BoundaryCapture::new();
    let mut dp = Datapath::start(
        &d,
        &DatapathConfig {
            capture: Some(capture.clone()),
            trace_ecalls: true,
            ..DatapathConfig::default()
        },
    )
    .unwrap();
    let warm = dp.run_traffic(64, 0, 1).unwrap();
    assert_eq!(warm.samples.len(), 1);
    let before = dp.switch_counters().unwrap();
    assert!(before.floods >= 1);

    let report = dp.run_traffic(256, 0, 200).unwrap();
    assert_eq!(report.samples.len(), 200);
    assert_eq!((report.lost, report.corrupted), (0, 0));
    let after = dp.switch_counters().unwrap();
    assert_eq!(after.floods, before.floods);
    assert_eq!(after.unicasts - before.unicasts, 400);
    assert_eq!(after.flow_mods_received, 0);
    assert_eq!(dp.controller_stats().flow_mods_sent(), 0);
    assert_eq!(dp.controller_stats().sent_of_type(OFPT_FLOW_MOD), 0);

    let totals = dp.take_ecall_totals().unwrap();
    assert_eq!(totals.frames, 402);
    assert_eq!(totals.calls[&EcallKind::Write], 402);
    assert!(totals.calls[&EcallKind::GetState] >= 2 * 402);
    assert!(totals.calls[&EcallKind::Read] >= 402);

    let bytes = capture.snapshot();
    assert!(!bytes.is_empty());
    assert_eq!(dp.compartment().count_secret_occurrences(&bytes), 0);
    assert!(dp.compartment().audit_self_check());
    let counters = dp.shutdown();
    assert_eq!(counters.dropped, 0);
}

#[test]
fn small_sweep_reports_every_size() {
    let d = deployment();
    let mut dp = Datapath::start(
        &d,
        &DatapathConfig {
            trace_ecalls: true,
            ..DatapathConfig::default()
        },
    )
    .unwrap();
    let sizes = [64, 512, 1024, 1408];
    let report = run_latency_benchmark(&mut dp, &sizes, 2000, 30, 50.0).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.summary.is_some() && r.lost == 0));
    assert!(report.slope_ns_per_byte().unwrap().is_finite());
    let text = format_latency(&report);
    assert_eq!(text.lines().count(), 1 + 4 + 1 + 2);
    let ecalls = format_ecalls(&report);
    assert_eq!(ecalls.lines().next().unwrap(), ECALL_COLUMNS.join("\t"));
    assert_eq!(ecalls.lines().count(), 5);
}

#[test]
fn hardened_switch_rejects_legacy_controller() {
    let d = deployment();
    let err = Datapath::start(
        &d,
        &DatapathConfig {
            policy: CipherPolicy::hardened(),
            controller_ciphers: "AES256-SHA:AES128-SHA".into(),
            ..DatapathConfig::default()
        },
    )
    .err()
    .expect("handshake must fail");
    assert!(matches!(err, HarnessError::Handshake(_)), "{err}");
}
