use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use openssl::x509::X509;
use trustplane::attestation_agent::{AgentConfig, AttestationAgent, LocalEndpoint};
use trustplane::enclave_tls::{CipherPolicy, Compartment, CompartmentConfig};
use trustplane::enrollment::{run_enrollment_with, EnrollmentOptions, EnrollmentSession, Stage, Tamper};
use trustplane::extended_ca::{CaConfig, ExtendedCa, KnownGoodConfig};
use trustplane::measurement_log::DEFAULT_MEASUREMENT_PCR;
use trustplane::platform::HostManifest;
use trustplane::rng::{self, Rng};
use trustplane::root_of_trust::{AttestationIdentity, AttestationKey};
use trustplane::sdn_harness::bench;
use trustplane::sdn_harness::{Datapath, DatapathConfig, Deployment, DeploymentConfig};
use trustplane::service::BoundAddr;

use crate::config::{self, BenchSettings, ScenarioConfig};
use crate::exit;
use crate::{BenchArgs, EnrollArgs, KnownGoodArgs, ServeAgentArgs, ServeCaArgs};

const DEFAULT_CA_ADDR: &str = "127.0.0.1:7700";
const DEFAULT_AGENT_ADDR: &str = "127.0.0.1:7701";
const DEFAULT_ADMIN_ADDR: &str = "127.0.0.1:7702";
/// The file modified on a tampered host.
pub const TAMPERED_PATH: &str = "/usr/sbin/ovs-vswitchd";
const IDENTITY_LABEL: &str = "host-attestation-key";

/// Exit code plus the message printed on stderr.
#[derive(Debug)]
struct Fail(u8, String);

type Outcome = Result<u8, Fail>;

fn finish(r: Outcome) -> u8 {
    match r {
        Ok(code) => code,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn config_err(msg: impl ToString) -> Fail {
    Fail(exit::CONFIG, msg.to_string())
}

fn component_rng(seed: Option<&str>, label: &str) -> Rng {
    match seed {
        Some(s) => rng::seeded(s, label),
        None => rng::for_component(label),
    }
}

fn parse_tamper(flag: Option<&str>, scenario: &ScenarioConfig) -> Result<Tamper, Fail> {
    match flag {
        Some(t) => t.parse().map_err(config_err),
        None => Ok(scenario.tamper),
    }
}

fn announce(line: String) {
    println!("{line}");
    let _ = std::io::stdout().flush();
}

fn describe_addr(a: &BoundAddr) -> String {
    match a {
        BoundAddr::Tcp(s) => s.to_string(),
        BoundAddr::Unix(p) => format!("unix:{}", p.display()),
    }
}

/// Blocks until SIGINT or SIGTERM.
fn wait_for_signal() -> Result<(), Fail> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, stop.clone()).map_err(|e| Fail(exit::BIND, format!("signal handler: {e}")))?;
    }
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    Ok(())
}

pub fn serve_ca(scenario: &ScenarioConfig, args: &ServeCaArgs) -> u8 {
    finish(run_serve_ca(scenario, args))
}

fn run_serve_ca(scenario: &ScenarioConfig, args: &ServeCaArgs) -> Outcome {
    let seed = scenario.effective_seed();
    let kg_path = args
        .known_good
        .as_deref()
        .or(scenario.known_good.as_deref())
        .ok_or_else(|| config_err("serve-ca needs --known-good"))?;
    let text = std::fs::read_to_string(kg_path).map_err(|e| config_err(format!("{}: {e}", kg_path.display())))?;
    let known_good = KnownGoodConfig::parse(&text).map_err(|e| config_err(format!("{}: {e}", kg_path.display())))?;
    let root_seed = match (&args.root_seed, scenario.ca_root_seed, &seed) {
        (Some(s), _, _) => Some(config::root_seed(s)),
        (None, Some(s), _) => Some(s),
        (None, None, Some(s)) => Some(rng::random_bytes(&mut rng::seeded(s, "ca-root"))),
        (None, None, None) => None,
    };
    let ca_config = CaConfig {
        nonce_ttl: Duration::from_secs(args.nonce_ttl_secs),
        ..CaConfig::default()
    };
    let ca = Arc::new(
        ExtendedCa::new(root_seed, known_good, ca_config, component_rng(seed.as_deref(), "ca"))
            .map_err(|e| Fail(exit::CONFIG, e.to_string()))?,
    );
    if let Some(out) = &args.root_cert_out {
        let pem = ca.root_certificate().to_pem().map_err(config_err)?;
        std::fs::write(out, pem).map_err(|e| config_err(format!("{}: {e}", out.display())))?;
    }
    let default_addr = |s: &str| s.parse::<SocketAddr>().expect("literal address");
    let listen = args.listen.or(scenario.ca_addr).unwrap_or_else(|| default_addr(DEFAULT_CA_ADDR));
    let admin = args.admin.or(scenario.ca_admin_addr).unwrap_or_else(|| default_addr(DEFAULT_ADMIN_ADDR));
    let service = ca.clone().serve(listen).map_err(|e| Fail(exit::BIND, format!("{listen}: {e}")))?;
    let admin_service = ca.clone().serve_admin(admin).map_err(|e| Fail(exit::BIND, format!("{admin}: {e}")))?;
    announce(format!("ca listening on {}", service.local_addr()));
    announce(format!("admin listening on {}", admin_service.local_addr()));
    wait_for_signal()?;
    service.shutdown();
    admin_service.shutdown();
    log::info!("ca stopped");
    Ok(exit::OK)
}

fn host_identity(seed: Option<&str>) -> AttestationIdentity {
    AttestationIdentity::generate(&mut component_rng(seed, IDENTITY_LABEL))
}

pub fn serve_agent(scenario: &ScenarioConfig, args: &ServeAgentArgs) -> u8 {
    finish(run_serve_agent(scenario, args))
}

fn run_serve_agent(scenario: &ScenarioConfig, args: &ServeAgentArgs) -> Outcome {
    let seed = scenario.effective_seed();
    let endpoint: LocalEndpoint = match (&args.listen, &scenario.agent_endpoint) {
        (Some(s), _) => s.parse().map_err(config_err)?,
        (None, Some(e)) => e.clone(),
        (None, None) => DEFAULT_AGENT_ADDR.parse().expect("literal address"),
    };
    let selection = match &args.pcr_selection {
        Some(s) => config::parse_selection_list("--pcr-selection", s).map_err(config_err)?,
        None => scenario.pcr_selection.clone(),
    };
    let manifest = match parse_tamper(args.tamper.as_deref(), scenario)? {
        Tamper::None => HostManifest::reference(),
        Tamper::Measurement => HostManifest::reference().with_tampered(TAMPERED_PATH).expect("reference file"),
        other => return Err(config_err(format!("tamper {other} is applied by the enrolling client, not the host"))),
    };
    let identity = host_identity(seed.as_deref());
    let key = hex::encode(identity.public_key().to_bytes());
    let host = Arc::new(
        manifest
            .boot(identity, DEFAULT_MEASUREMENT_PCR)
            .map_err(config_err)?,
    );
    let agent_config = AgentConfig::new("host-0", endpoint.clone(), selection).map_err(config_err)?;
    let service = Arc::new(AttestationAgent::new(agent_config, host))
        .serve()
        .map_err(|e| Fail(exit::BIND, format!("{endpoint}: {e}")))?;
    announce(format!("attestation key {key}"));
    announce(format!("agent listening on {}", describe_addr(service.addr())));
    wait_for_signal()?;
    service.shutdown();
    Ok(exit::OK)
}

pub fn known_good(scenario: &ScenarioConfig, args: &KnownGoodArgs) -> u8 {
    finish(run_known_good(scenario, args))
}

fn run_known_good(scenario: &ScenarioConfig, args: &KnownGoodArgs) -> Outcome {
    let mut cfg = KnownGoodConfig::from_manifest(&HostManifest::reference());
    let seed = scenario.effective_seed();
    if let Some(s) = &seed {
        cfg.trust_key(host_identity(Some(s)).public_key().clone());
    }
    for k in &args.attestation_keys {
        let bytes = hex::decode(k).map_err(|e| config_err(format!("attestation key {k:?}: {e}")))?;
        let key = AttestationKey::from_bytes(&bytes).ok_or_else(|| config_err(format!("attestation key {k:?} is not a valid key")))?;
        cfg.trust_key(key);
    }
    if seed.is_none() && args.attestation_keys.is_empty() {
        log::warn!("no attestation key trusted; every quote will be rejected");
    }
    let text = cfg.serialize();
    match &args.out {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(exit::OK)
}

pub fn enroll(scenario: &ScenarioConfig, args: &EnrollArgs) -> u8 {
    finish(run_enroll(scenario, args))
}

fn load_root(path: &Path) -> Result<X509, Fail> {
    let pem = std::fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    X509::from_pem(&pem).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn run_enroll(scenario: &ScenarioConfig, args: &EnrollArgs) -> Outcome {
    let tamper = if args.replay_nonce {
        Tamper::NonceReplay
    } else {
        parse_tamper(args.tamper.as_deref(), scenario)?
    };
    let options = EnrollmentOptions { tamper };
    let session = match args.ca.or(scenario.ca_addr) {
        Some(ca) => {
            if tamper == Tamper::Measurement {
                return Err(config_err("against a remote CA, tamper the host with serve-agent --tamper measurement"));
            }
            let agent = match (&args.agent, &scenario.agent_endpoint) {
                (Some(s), _) => s.parse().map_err(config_err)?,
                (None, Some(e)) => e.clone(),
                (None, None) => return Err(config_err("enroll against a remote CA needs --agent")),
            };
            let root_path = args.ca_root.as_deref().ok_or_else(|| config_err("enroll against a remote CA needs --ca-root"))?;
            let compartment = Compartment::new(load_root(root_path)?, CompartmentConfig::new(&args.common_name));
            run_enrollment_with(ca, &agent, &compartment, &options)
        }
        None => {
            let reference = HostManifest::reference();
            let host_manifest = match tamper {
                Tamper::Measurement => reference.with_tampered(TAMPERED_PATH).expect("reference file"),
                _ => reference.clone(),
            };
            let deployment = Deployment::start(&DeploymentConfig {
                seed: scenario.effective_seed(),
                reference,
                host_manifest,
                pcr_selection: scenario.pcr_selection.clone(),
                ..DeploymentConfig::default()
            })
            .map_err(|e| Fail(exit::BIND, e.to_string()))?;
            let compartment = deployment.new_compartment(&args.common_name, false);
            run_enrollment_with(deployment.ca_addr(), deployment.agent_endpoint(), &compartment, &options)
        }
    };
    print!("{}", session_report(&session));
    Ok(session.failure().map_or(exit::OK, |f| exit::for_failure(&f.reason)))
}

fn session_report(session: &EnrollmentSession) -> String {
    let mut s = String::new();
    writeln!(s, "state: {}", session.state()).expect("write to string");
    let history: Vec<&str> = session.history().iter().map(|h| h.name()).collect();
    writeln!(s, "history: {}", history.join(" -> ")).expect("write to string");
    if let Some(n) = session.nonce() {
        writeln!(s, "nonce: {}", hex::encode(n)).expect("write to string");
    }
    if let Some(der) = session.certificate() {
        let subject = X509::from_der(der)
            .ok()
            .and_then(|c| trustplane::pki::common_name(&c))
            .unwrap_or_default();
        writeln!(s, "certificate: CN={subject} ({} bytes DER)", der.len()).expect("write to string");
    }
    if let Some(r) = session.rejection() {
        writeln!(s, "rejection: {}", r.name()).expect("write to string");
    } else if session.failure().is_some() {
        writeln!(s, "failure: {}", session.describe()).expect("write to string");
    }
    if let Ok(timings) = session.stage_timings() {
        s.push_str("Stage\tSeconds\n");
        for stage in Stage::ALL {
            match timings.get(&stage) {
                Some(d) => writeln!(s, "{}\t{:.6}", stage.label(), d.as_secs_f64()),
                None => writeln!(s, "{}\tNA", stage.label()),
            }
            .expect("write to string");
        }
    }
    s
}

fn merge_bench(base: &BenchSettings, args: &BenchArgs) -> Result<BenchSettings, Fail> {
    let mut b = base.clone();
    if let Some(s) = &args.sizes {
        b.sizes = bench::parse_sizes(s).map_err(config_err)?;
    }
    if let Some(r) = args.rate {
        b.rate_pps = r;
    }
    if let Some(c) = args.count {
        b.count = c;
    }
    if let Some(c) = args.cutoff_ms {
        b.cutoff_ms = c;
    }
    if args.trace_ecalls {
        b.trace_ecalls = true;
    }
    if args.no_trace_ecalls {
        b.trace_ecalls = false;
    }
    if let Some(k) = args.keygen_iterations {
        b.keygen_iterations = k;
    }
    if let Some(o) = &args.out {
        b.out = Some(o.clone());
    }
    if b.count == 0 {
        return Err(config_err("--count must be positive"));
    }
    if b.cutoff_ms.is_nan() || b.cutoff_ms <= 0.0 {
        return Err(config_err("--cutoff-ms must be positive"));
    }
    if let Some(&big) = b.sizes.iter().find(|&&s| s > trustplane::sdn_harness::packet::MTU) {
        return Err(config_err(format!("frame size {big} exceeds the {}-byte MTU", trustplane::sdn_harness::packet::MTU)));
    }
    if let Some(&small) = b.sizes.iter().find(|&&s| s < trustplane::sdn_harness::packet::MIN_FRAME_LEN) {
        return Err(config_err(format!(
            "frame size {small} is below the {}-byte minimum",
            trustplane::sdn_harness::packet::MIN_FRAME_LEN
        )));
    }
    Ok(b)
}

pub fn bench(scenario: &ScenarioConfig, args: &BenchArgs) -> u8 {
    finish(run_bench(scenario, args))
}

fn bench_err(e: impl ToString) -> Fail {
    Fail(exit::BENCH, e.to_string())
}

fn run_bench(scenario: &ScenarioConfig, args: &BenchArgs) -> Outcome {
    let settings = merge_bench(&scenario.bench, args)?;
    let policy = if args.hardened {
        CipherPolicy::hardened()
    } else {
        CipherPolicy::compatible()
    };
    let deployment = Deployment::start(&DeploymentConfig {
        seed: scenario.effective_seed(),
        pcr_selection: scenario.pcr_selection.clone(),
        ..DeploymentConfig::default()
    })
    .map_err(|e| Fail(exit::BIND, e.to_string()))?;

    let mut reports: Vec<(&str, String)> = Vec::new();
    let mut datapath = Datapath::start(
        &deployment,
        &DatapathConfig {
            controller_ciphers: policy.cipher_list(),
            policy: policy.clone(),
            trace_ecalls: settings.trace_ecalls,
            ..DatapathConfig::default()
        },
    )
    .map_err(bench_err)?;
    let latency = bench::run_latency_benchmark(
        &mut datapath,
        &settings.sizes,
        settings.rate_pps,
        settings.count,
        settings.cutoff_ms,
    )
    .map_err(bench_err)?;
    datapath.shutdown();
    reports.push(("latency.tsv", bench::format_latency(&latency)));
    reports.push(("boxplot.tsv", bench::format_boxplot(&latency)));
    if settings.trace_ecalls {
        reports.push(("ecalls.tsv", bench::format_ecalls(&latency)));
    }
    if let Some(cpu) = &latency.cpu {
        reports.push(("cpu.tsv", bench::format_cpu(cpu)));
    }

    if settings.keygen_iterations > 0 {
        let enrollments =
            bench::run_enrollment_benchmark(&deployment, settings.keygen_iterations, &policy).map_err(bench_err)?;
        if let Some(init) = enrollments.init_summary() {
            reports.push(("keygen.tsv", bench::format_keygen(&init)));
        }
        reports.push(("attestation.tsv", bench::format_attestation(&enrollments.stage_summaries())));
    }

    if let Some(dir) = &settings.out {
        std::fs::create_dir_all(dir).map_err(|e| bench_err(format!("{}: {e}", dir.display())))?;
    }
    for (name, body) in &reports {
        println!("== {name}\n{body}");
        if let Some(dir) = &settings.out {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| bench_err(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(exit::OK)
}
