use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_trustplane");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn trustplane")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Child process killed with SIGTERM on drop.
struct Server {
    child: Child,
    lines: BufReader<ChildStdout>,
}

impl Server {
    fn spawn(args: &[&str]) -> Server {
        let mut child = Command::new(BIN)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let lines = BufReader::new(child.stdout.take().unwrap());
        Server { child, lines }
    }

    /// Value after `prefix` on the next announcement line.
    fn expect(&mut self, prefix: &str) -> String {
        let mut line = String::new();
        self.lines.read_line(&mut line).unwrap();
        line.trim_end()
            .strip_prefix(prefix)
            .unwrap_or_else(|| panic!("expected {prefix:?}, got {line:?}"))
            .to_string()
    }

    fn terminate(mut self) -> Option<i32> {
        let pid = self.child.id().to_string();
        Command::new("kill").args(["-TERM", &pid]).status().unwrap();
        self.child.wait().unwrap().code()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn in_process_enrollment_reports_stages() {
    let o = run(&["--seed", "cli-a", "enroll"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(out.starts_with("state: ENROLLED\n"));
    assert!(out.contains("history: INIT -> NONCE_RECEIVED -> EVIDENCE_COLLECTED -> KEYED -> SUBMITTED -> ENROLLED"));
    for label in ["TPM quote\t", "Key generation\t", "CSR signing\t", "Total attestation time\t"] {
        assert!(out.contains(label), "missing {label:?} in {out}");
    }
}

#[test]
fn tamper_modes_map_to_exit_codes() {
    for (flags, code, name) in [
        (&["--tamper", "measurement"][..], 13, "UNKNOWN_MEASUREMENT"),
        (&["--tamper", "quote-sig"][..], 10, "QUOTE_SIG"),
        (&["--replay-nonce"][..], 11, "NONCE"),
        (&["--tamper", "csr"][..], 15, "BAD_CSR"),
    ] {
        let mut args = vec!["--seed", "cli-b", "enroll"];
        args.extend_from_slice(flags);
        let o = run(&args);
        let out = stdout(&o);
        assert_eq!(o.status.code(), Some(code), "{flags:?}: {out}");
        assert!(out.contains("state: FAILED"));
        assert!(out.contains(&format!("rejection: {name}\n")), "{out}");
    }
}

#[test]
fn networked_services_enroll_and_stop_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let kg = dir.path().join("known-good.txt");
    let root = dir.path().join("root.pem");
    let kg_s = kg.to_str().unwrap();
    let root_s = root.to_str().unwrap();
    assert_eq!(run(&["--seed", "net", "known-good", "--out", kg_s]).status.code(), Some(0));

    let mut ca = Server::spawn(&[
        "--seed", "net", "serve-ca", "--listen", "127.0.0.1:0", "--admin", "127.0.0.1:0",
        "--known-good", kg_s, "--root-cert-out", root_s,
    ]);
    let ca_addr = ca.expect("ca listening on ");
    ca.expect("admin listening on ");
    let nonce = trustplane::extended_ca::request_nonce(&ca_addr.parse().unwrap()).unwrap();
    assert_eq!(nonce.len(), 32);
    let mut agent = Server::spawn(&["--seed", "net", "serve-agent", "--listen", "127.0.0.1:0"]);
    agent.expect("attestation key ");
    let agent_addr = agent.expect("agent listening on ");

    let o = run(&["enroll", "--ca", &ca_addr, "--agent", &agent_addr, "--ca-root", root_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = run(&["enroll", "--ca", &ca_addr, "--agent", &agent_addr, "--ca-root", root_s, "--tamper", "quote-sig"]);
    assert_eq!(o.status.code(), Some(10));

    let dup = run(&["serve-ca", "--listen", &ca_addr, "--admin", "127.0.0.1:0", "--known-good", kg_s]);
    assert_eq!(dup.status.code(), Some(1));

    assert_eq!(agent.terminate(), Some(0));
    assert_eq!(ca.terminate(), Some(0));
    let o = run(&["enroll", "--ca", &ca_addr, "--agent", &agent_addr, "--ca-root", root_s]);
    assert_eq!(o.status.code(), Some(20), "{}", stdout(&o));
}

#[test]
fn tampered_host_is_rejected_over_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let kg = dir.path().join("kg");
    let root = dir.path().join("root.pem");
    let (kg_s, root_s) = (kg.to_str().unwrap(), root.to_str().unwrap());
    run(&["--seed", "tam", "known-good", "--out", kg_s]);
    let mut ca = Server::spawn(&[
        "--seed", "tam", "serve-ca", "--listen", "127.0.0.1:0", "--admin", "127.0.0.1:0",
        "--known-good", kg_s, "--root-cert-out", root_s,
    ]);
    let ca_addr = ca.expect("ca listening on ");
    let mut agent = Server::spawn(&["--seed", "tam", "serve-agent", "--listen", "127.0.0.1:0", "--tamper", "measurement"]);
    agent.expect("attestation key ");
    let agent_addr = agent.expect("agent listening on ");
    let o = run(&["enroll", "--ca", &ca_addr, "--agent", &agent_addr, "--ca-root", root_s]);
    assert_eq!(o.status.code(), Some(13));
    assert!(stdout(&o).contains("rejection: UNKNOWN_MEASUREMENT"));
}

#[test]
fn bench_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reports");
    let o = run(&[
        "--seed", "bench", "bench", "--sizes", "64:192:64", "--count", "20", "--rate", "1000",
        "--cutoff-ms", "1000", "--keygen-iterations", "2", "--trace-ecalls", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["latency.tsv", "boxplot.tsv", "ecalls.tsv", "cpu.tsv", "keygen.tsv", "attestation.tsv"] {
        assert!(Path::new(&out.join(f)).is_file(), "{f} missing");
    }
    let ecalls = std::fs::read_to_string(out.join("ecalls.tsv")).unwrap();
    assert!(ecalls.starts_with("Size (b)\tread\twrite\tget_state\tget_error\tTotal enclave access\n"));
    assert_eq!(ecalls.lines().count(), 4);
    let latency = std::fs::read_to_string(out.join("latency.tsv")).unwrap();
    assert!(!latency.contains("NA"), "{latency}");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "enroll"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--sizes", "64:4000:64"]).status.code(), Some(2));
    assert_eq!(run(&["enroll", "--tamper", "everything"]).status.code(), Some(2));
    assert_eq!(run(&["enroll", "--ca", "127.0.0.1:1", "--agent", "127.0.0.1:2"]).status.code(), Some(2));
    assert_eq!(run(&["serve-ca"]).status.code(), Some(2));
}

#[test]
fn scenario_file_drives_enrollment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.conf");
    std::fs::write(&cfg, "# replayed nonce\nseed = scen\ntamper = nonce-replay\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "enroll"]);
    assert_eq!(o.status.code(), Some(11), "{}", stdout(&o));
}
