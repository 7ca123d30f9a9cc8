//! Certificate authority with attestation-gated issuance.
//!
//! Besides signing certificates the CA issues single-use nonces and checks
//! each enrollment request against a known-good configuration before it
//! signs the enclosed CSR. Checks run in a fixed order so the rejection
//! reason for a request is deterministic:
//!
//! 1. quote signature under a trusted attestation key (`QUOTE_SIG`)
//! 2. nonce is CA-issued, unconsumed and unexpired; consumed here (`NONCE`)
//! 3. replayed measurement list reproduces the quoted composite (`PCR_MISMATCH`)
//! 4. every entry is allowlisted (`UNKNOWN_MEASUREMENT`)
//! 5. every required path is present (`MISSING_REQUIRED`)
//! 6. CSR proof of possession (`BAD_CSR`)
//!
//! Nothing in the quote covers the CSR: the key is generated after the
//! quote is taken, so a valid quote could in principle be paired with
//! another CSR by a party that holds the nonce.
//!
//! Service protocol, framed as `len(4) || body`:
//!
//! ```text
//! 0x10                                            -> 0x11 || nonce(32)
//! 0x12 || quote_len(2) || quote || list_len(4) || list || csr_len(4) || csr
//!                                                 -> 0x13 || cert_der | 0x1F || reason(1)
//! ```
//!
//! The administrative listener accepts `0x20 || csr_der` and answers
//! `0x21 || cert_der` or `0x1F || reason(1)`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use openssl::pkey::{PKey, Private};
use openssl::x509::X509;
use thiserror::Error;

use crate::measurement_log::{self, MeasurementList, PcrIndex, DEFAULT_MEASUREMENT_PCR};
use crate::pki::{self, CertUsage};
use crate::platform::HostManifest;
use crate::rng::{self, Rng};
use crate::root_of_trust::{pcr_composite, verify_quote, AttestationKey, KeyId, Nonce, Quote};
use crate::service::{self, ServiceHandle};
use crate::wire::{self, Reader};
use crate::Digest;

pub const MSG_NONCE_REQUEST: u8 = 0x10;
pub const MSG_NONCE: u8 = 0x11;
pub const MSG_ENROLL: u8 = 0x12;
pub const MSG_CERTIFICATE: u8 = 0x13;
pub const MSG_REJECT: u8 = 0x1F;
pub const MSG_CONTROLLER_CSR: u8 = 0x20;
pub const MSG_CONTROLLER_CERT: u8 = 0x21;

const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RejectionReason {
    QuoteSig = 0x01,
    Nonce = 0x02,
    PcrMismatch = 0x03,
    UnknownMeasurement = 0x04,
    MissingRequired = 0x05,
    BadCsr = 0x06,
    /// The request could not be decoded at all.
    Malformed = 0x7F,
}

impl RejectionReason {
    pub const CHECKS: [RejectionReason; 6] = [
        RejectionReason::QuoteSig,
        RejectionReason::Nonce,
        RejectionReason::PcrMismatch,
        RejectionReason::UnknownMeasurement,
        RejectionReason::MissingRequired,
        RejectionReason::BadCsr,
    ];

    pub fn from_byte(b: u8) -> Option<RejectionReason> {
        Some(match b {
            0x01 => RejectionReason::QuoteSig,
            0x02 => RejectionReason::Nonce,
            0x03 => RejectionReason::PcrMismatch,
            0x04 => RejectionReason::UnknownMeasurement,
            0x05 => RejectionReason::MissingRequired,
            0x06 => RejectionReason::BadCsr,
            0x7F => RejectionReason::Malformed,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RejectionReason::QuoteSig => "QUOTE_SIG",
            RejectionReason::Nonce => "NONCE",
            RejectionReason::PcrMismatch => "PCR_MISMATCH",
            RejectionReason::UnknownMeasurement => "UNKNOWN_MEASUREMENT",
            RejectionReason::MissingRequired => "MISSING_REQUIRED",
            RejectionReason::BadCsr => "BAD_CSR",
            RejectionReason::Malformed => "MALFORMED",
        }
    }
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnownGoodError {
    #[error("required path {0:?} has no allowlisted measurement")]
    RequiredWithoutAllowed(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Allowlist of template digests (each with its path as metadata), the
/// paths that must be present, and the attestation keys the CA trusts.
#[derive(Debug, Clone, Default)]
pub struct KnownGoodConfig {
    allowed_template_digests: HashMap<Digest, String>,
    required_paths: BTreeSet<String>,
    trusted_attestation_keys: HashMap<KeyId, AttestationKey>,
}

impl KnownGoodConfig {
    pub fn new() -> KnownGoodConfig {
        KnownGoodConfig::default()
    }

    /// Allows every file of `manifest` and requires all of them.
    pub fn from_manifest(manifest: &HostManifest) -> KnownGoodConfig {
        let mut cfg = KnownGoodConfig::new();
        for f in &manifest.files {
            cfg.allow_content(&f.path, &f.content);
            cfg.require(&f.path).expect("just allowed");
        }
        cfg
    }

    pub fn allow(&mut self, path: &str, template: Digest) -> &mut Self {
        self.allowed_template_digests.insert(template, path.to_string());
        self
    }

    pub fn allow_content(&mut self, path: &str, content: &[u8]) -> &mut Self {
        self.allow(path, measurement_log::template_digest(path, &Digest::of(content)))
    }

    pub fn require(&mut self, path: &str) -> Result<&mut Self, KnownGoodError> {
        if !self.allowed_template_digests.values().any(|p| p == path) {
            return Err(KnownGoodError::RequiredWithoutAllowed(path.to_string()));
        }
        self.required_paths.insert(path.to_string());
        Ok(self)
    }

    pub fn unrequire(&mut self, path: &str) -> &mut Self {
        self.required_paths.remove(path);
        self
    }

    pub fn trust_key(&mut self, key: AttestationKey) -> &mut Self {
        self.trusted_attestation_keys.insert(key.key_id(), key);
        self
    }

    pub fn is_allowed(&self, template: &Digest) -> bool {
        self.allowed_template_digests.contains_key(template)
    }

    pub fn required_paths(&self) -> impl Iterator<Item = &str> {
        self.required_paths.iter().map(String::as_str)
    }

    pub fn trusted_key(&self, id: &KeyId) -> Option<&AttestationKey> {
        self.trusted_attestation_keys.get(id)
    }

    /// Text form, one directive per line:
    ///
    /// ```text
    /// allow <template_digest_hex> <path>
    /// require <path>
    /// attestation-key <ed25519_public_key_hex>
    /// ```
    pub fn serialize(&self) -> String {
        let mut allowed: Vec<_> = self.allowed_template_digests.iter().collect();
        allowed.sort_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)));
        let mut out = String::new();
        for (d, p) in allowed {
            out.push_str(&format!("allow {d} {p}\n"));
        }
        for p in &self.required_paths {
            out.push_str(&format!("require {p}\n"));
        }
        let mut keys: Vec<_> = self.trusted_attestation_keys.values().collect();
        keys.sort_by_key(|k| k.key_id());
        for k in keys {
            out.push_str(&format!("attestation-key {}\n", hex::encode(k.to_bytes())));
        }
        out
    }

    pub fn parse(text: &str) -> Result<KnownGoodConfig, KnownGoodError> {
        let mut cfg = KnownGoodConfig::new();
        let mut required = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |reason: &str| KnownGoodError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (directive, rest) = line.split_once(' ').ok_or_else(|| err("missing argument"))?;
            match directive {
                "allow" => {
                    let (digest, path) = rest.split_once(' ').ok_or_else(|| err("allow needs digest and path"))?;
                    let digest = Digest::from_str(digest).map_err(|_| err("bad digest"))?;
                    cfg.allow(path, digest);
                }
                "require" => required.push((i + 1, rest.to_string())),
                "attestation-key" => {
                    let bytes = hex::decode(rest.trim()).map_err(|_| err("bad key hex"))?;
                    let key = AttestationKey::from_bytes(&bytes).ok_or_else(|| err("bad attestation key"))?;
                    cfg.trust_key(key);
                }
                _ => return Err(err("unknown directive")),
            }
        }
        for (line, path) in required {
            cfg.require(&path).map_err(|e| KnownGoodError::Parse {
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonceRecord {
    pub nonce: Nonce,
    pub issued_at: Instant,
    pub consumed: bool,
}

#[derive(Debug, Clone)]
pub struct CaConfig {
    pub nonce_ttl: Duration,
    pub cert_validity: Duration,
    pub root_validity: Duration,
    pub measurement_pcr: PcrIndex,
    pub root_common_name: String,
}

impl Default for CaConfig {
    fn default() -> Self {
        CaConfig {
            nonce_ttl: Duration::from_secs(60),
            cert_validity: Duration::from_secs(24 * 3600),
            root_validity: Duration::from_secs(10 * 365 * 24 * 3600),
            measurement_pcr: DEFAULT_MEASUREMENT_PCR,
            root_common_name: "trustplane extended CA".to_string(),
        }
    }
}

/// What a compartment submits for certification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentRequest {
    pub quote: Quote,
    pub measurement_list: MeasurementList,
    pub csr: Vec<u8>,
}

impl EnrollmentRequest {
    pub fn encode(&self) -> Vec<u8> {
        let q = self.quote.encode();
        let l = self.measurement_list.serialize().into_bytes();
        let mut out = Vec::with_capacity(1 + 2 + q.len() + 4 + l.len() + 4 + self.csr.len());
        out.push(MSG_ENROLL);
        out.extend_from_slice(&(q.len() as u16).to_be_bytes());
        out.extend_from_slice(&q);
        out.extend_from_slice(&(l.len() as u32).to_be_bytes());
        out.extend_from_slice(&l);
        out.extend_from_slice(&(self.csr.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.csr);
        out
    }

    pub fn decode(body: &[u8]) -> Option<EnrollmentRequest> {
        let mut r = Reader::new(body);
        if r.u8().ok()? != MSG_ENROLL {
            return None;
        }
        let qlen = r.u16().ok()? as usize;
        let quote = Quote::decode(r.take(qlen).ok()?).ok()?;
        let llen = r.u32().ok()? as usize;
        let text = std::str::from_utf8(r.take(llen).ok()?).ok()?;
        let measurement_list = MeasurementList::parse(text).ok()?;
        let clen = r.u32().ok()? as usize;
        let csr = r.take(clen).ok()?.to_vec();
        r.is_empty().then_some(EnrollmentRequest {
            quote,
            measurement_list,
            csr,
        })
    }
}

pub struct ExtendedCa {
    root_key: PKey<Private>,
    root_cert: X509,
    known_good: KnownGoodConfig,
    config: CaConfig,
    nonces: Mutex<HashMap<Nonce, NonceRecord>>,
    rng: Mutex<Rng>,
}

impl fmt::Debug for ExtendedCa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtendedCa")
            .field("root", &pki::common_name(&self.root_cert))
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error)]
pub enum CaError {
    #[error("openssl: {0}")]
    OpenSsl(#[from] openssl::error::ErrorStack),
    #[error("bind failed: {0}")]
    Bind(#[from] io::Error),
}

impl ExtendedCa {
    /// Creates a CA whose root key is derived from `root_seed`, or drawn
    /// from `rng` when no seed is given.
    pub fn new(
        root_seed: Option<[u8; 32]>,
        known_good: KnownGoodConfig,
        config: CaConfig,
        mut rng: Rng,
    ) -> Result<ExtendedCa, CaError> {
        let seed = root_seed.unwrap_or_else(|| rng::random_bytes(&mut rng));
        let root_key = pki::ec_key_from_seed(&seed)?;
        let serial = pki::random_serial(&mut rng::seeded(&hex::encode(seed), "root-serial"))?;
        let root_cert = pki::self_signed_root(
            &root_key,
            &config.root_common_name,
            &serial,
            config.root_validity.as_secs() as i64,
        )?;
        Ok(ExtendedCa {
            root_key,
            root_cert,
            known_good,
            config,
            nonces: Mutex::new(HashMap::new()),
            rng: Mutex::new(rng),
        })
    }

    pub fn config(&self) -> &CaConfig {
        &self.config
    }

    pub fn known_good(&self) -> &KnownGoodConfig {
        &self.known_good
    }

    pub fn root_certificate(&self) -> &X509 {
        &self.root_cert
    }

    /// Fresh nonce, recorded as unconsumed.
    pub fn issue_nonce(&self) -> Nonce {
        let nonce: Nonce = rng::random_bytes(&mut *self.rng.lock().expect("rng lock"));
        let now = Instant::now();
        let ttl = self.config.nonce_ttl;
        let mut nonces = self.nonces.lock().expect("nonce lock");
        nonces.retain(|_, r| now.duration_since(r.issued_at) <= ttl);
        nonces.insert(
            nonce,
            NonceRecord {
                nonce,
                issued_at: now,
                consumed: false,
            },
        );
        nonce
    }

    pub fn nonce_record(&self, nonce: &Nonce) -> Option<NonceRecord> {
        self.nonces.lock().expect("nonce lock").get(nonce).copied()
    }

    fn consume_nonce(&self, nonce: &Nonce) -> bool {
        let mut nonces = self.nonces.lock().expect("nonce lock");
        match nonces.get_mut(nonce) {
            Some(r) if !r.consumed && r.issued_at.elapsed() <= self.config.nonce_ttl => {
                r.consumed = true;
                true
            }
            _ => false,
        }
    }

    fn check_pcrs(&self, quote: &Quote, list: &MeasurementList) -> bool {
        if !quote.selection.contains(&self.config.measurement_pcr) {
            return false;
        }
        // Entries recorded into an unquoted register are not anchored.
        if list.entries().iter().any(|e| !quote.selection.contains(&e.pcr())) {
            return false;
        }
        let replayed: Vec<Digest> = quote.selection.iter().map(|&i| list.replay_register(i)).collect();
        pcr_composite(&replayed) == quote.composite
    }

    /// Runs the checks in order and signs the CSR if all pass.
    pub fn enroll(&self, request: &EnrollmentRequest) -> Result<X509, RejectionReason> {
        let quote = &request.quote;
        let list = &request.measurement_list;

        let key = self
            .known_good
            .trusted_key(&quote.key_id)
            .ok_or(RejectionReason::QuoteSig)?;
        if !verify_quote(quote, &quote.nonce, key) {
            return Err(RejectionReason::QuoteSig);
        }
        if !self.consume_nonce(&quote.nonce) {
            return Err(RejectionReason::Nonce);
        }
        if !self.check_pcrs(quote, list) {
            return Err(RejectionReason::PcrMismatch);
        }
        if !list.entries().iter().all(|e| self.known_good.is_allowed(e.template_digest())) {
            return Err(RejectionReason::UnknownMeasurement);
        }
        if !self.known_good.required_paths().all(|p| list.contains_path(p)) {
            return Err(RejectionReason::MissingRequired);
        }
        self.sign_csr(&request.csr, &[CertUsage::Client])
    }

    /// Operator-only path for the controller's own certificate. No
    /// attestation is performed.
    pub fn issue_controller_certificate(&self, csr: &[u8]) -> Result<X509, RejectionReason> {
        self.sign_csr(csr, &[CertUsage::Server, CertUsage::Client])
    }

    fn sign_csr(&self, csr: &[u8], usage: &[CertUsage]) -> Result<X509, RejectionReason> {
        let (req, key) = pki::verify_csr(csr).map_err(|e| {
            log::info!("CSR rejected: {e}");
            RejectionReason::BadCsr
        })?;
        let serial = pki::random_serial(&mut *self.rng.lock().expect("rng lock")).map_err(|_| RejectionReason::BadCsr)?;
        pki::issue_leaf(
            &self.root_key,
            &self.root_cert,
            req.subject_name(),
            &key,
            &serial,
            self.config.cert_validity.as_secs() as i64,
            usage,
        )
        .map_err(|e| {
            log::error!("certificate issuance failed: {e}");
            RejectionReason::BadCsr
        })
    }

    /// Public enrollment protocol: one request body in, one response body out.
    pub fn handle_message(&self, body: &[u8]) -> Vec<u8> {
        match body.first() {
            Some(&MSG_NONCE_REQUEST) if body.len() == 1 => {
                let mut out = vec![MSG_NONCE];
                out.extend_from_slice(&self.issue_nonce());
                out
            }
            Some(&MSG_ENROLL) => match EnrollmentRequest::decode(body) {
                Some(req) => match self.enroll(&req) {
                    Ok(cert) => certificate_body(MSG_CERTIFICATE, &cert),
                    Err(reason) => vec![MSG_REJECT, reason as u8],
                },
                None => vec![MSG_REJECT, RejectionReason::Malformed as u8],
            },
            _ => vec![MSG_REJECT, RejectionReason::Malformed as u8],
        }
    }

    pub fn handle_admin_message(&self, body: &[u8]) -> Vec<u8> {
        match body.split_first() {
            Some((&MSG_CONTROLLER_CSR, csr)) => match self.issue_controller_certificate(csr) {
                Ok(cert) => certificate_body(MSG_CONTROLLER_CERT, &cert),
                Err(reason) => vec![MSG_REJECT, reason as u8],
            },
            _ => vec![MSG_REJECT, RejectionReason::Malformed as u8],
        }
    }

    pub fn serve(self: Arc<Self>, addr: SocketAddr) -> Result<ServiceHandle, CaError> {
        let listener = TcpListener::bind(addr)?;
        Ok(service::spawn_tcp(listener, "extended-ca", move |s, _| {
            serve_connection(s, |b| self.handle_message(b))
        })?)
    }

    pub fn serve_admin(self: Arc<Self>, addr: SocketAddr) -> Result<ServiceHandle, CaError> {
        let listener = TcpListener::bind(addr)?;
        Ok(service::spawn_tcp(listener, "extended-ca-admin", move |s, _| {
            serve_connection(s, |b| self.handle_admin_message(b))
        })?)
    }
}

fn certificate_body(tag: u8, cert: &X509) -> Vec<u8> {
    match cert.to_der() {
        Ok(der) => {
            let mut out = Vec::with_capacity(1 + der.len());
            out.push(tag);
            out.extend_from_slice(&der);
            out
        }
        Err(_) => vec![MSG_REJECT, RejectionReason::BadCsr as u8],
    }
}

fn serve_connection(mut stream: TcpStream, handle: impl Fn(&[u8]) -> Vec<u8>) {
    let _ = stream.set_read_timeout(Some(IO_TIMEOUT));
    while let Ok(body) = wire::read_frame(&mut stream) {
        if wire::write_frame(&mut stream, &handle(&body)).is_err() {
            break;
        }
    }
}

#[derive(Debug, Error)]
pub enum CaClientError {
    #[error("CA unreachable: {0}")]
    Unreachable(#[from] io::Error),
    #[error("malformed CA response")]
    Protocol,
}

fn exchange(addr: &SocketAddr, body: &[u8]) -> Result<Vec<u8>, CaClientError> {
    let mut s = TcpStream::connect_timeout(addr, IO_TIMEOUT)?;
    s.set_read_timeout(Some(IO_TIMEOUT))?;
    s.set_nodelay(true)?;
    wire::write_frame(&mut s, body)?;
    Ok(wire::read_frame(&mut s)?)
}

pub fn request_nonce(addr: &SocketAddr) -> Result<Nonce, CaClientError> {
    let resp = exchange(addr, &[MSG_NONCE_REQUEST])?;
    match resp.split_first() {
        Some((&MSG_NONCE, rest)) => rest.try_into().map_err(|_| CaClientError::Protocol),
        _ => Err(CaClientError::Protocol),
    }
}

fn decode_certificate(resp: &[u8], tag: u8) -> Result<Result<Vec<u8>, RejectionReason>, CaClientError> {
    match resp.split_first() {
        Some((&t, der)) if t == tag => Ok(Ok(der.to_vec())),
        Some((&MSG_REJECT, [code])) => RejectionReason::from_byte(*code)
            .map(Err)
            .ok_or(CaClientError::Protocol),
        _ => Err(CaClientError::Protocol),
    }
}

/// Submits an enrollment request. The inner result carries the CA's verdict: a DER certificate or
/// a rejection reason.
pub fn submit_enrollment(
    addr: &SocketAddr,
    request: &EnrollmentRequest,
) -> Result<Result<Vec<u8>, RejectionReason>, CaClientError> {
    decode_certificate(&exchange(addr, &request.encode())?, MSG_CERTIFICATE)
}

pub fn request_controller_certificate(
    admin_addr: &SocketAddr,
    csr: &[u8],
) -> Result<Result<Vec<u8>, RejectionReason>, CaClientError> {
    let mut body = Vec::with_capacity(1 + csr.len());
    body.push(MSG_CONTROLLER_CSR);
    body.extend_from_slice(csr);
    decode_certificate(&exchange(admin_addr, &body)?, MSG_CONTROLLER_CERT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::HostPlatform;
    use crate::rng::seeded;
    use crate::root_of_trust::AttestationIdentity;

    struct Fixture {
        ca: ExtendedCa,
        host: HostPlatform,
        csr: Vec<u8>,
    }

    fn fixture(config: CaConfig) -> Fixture {
        let manifest = HostManifest::reference();
        let host = manifest
            .boot(AttestationIdentity::generate(&mut seeded("t", "host")), DEFAULT_MEASUREMENT_PCR)
            .unwrap();
        let mut kg = KnownGoodConfig::from_manifest(&manifest);
        kg.trust_key(host.attestation_key().clone());
        let ca = ExtendedCa::new(Some([7; 32]), kg, config, seeded("t", "ca")).unwrap();
        let key = pki::generate_rsa_key().unwrap();
        let csr = pki::build_csr(&key, "vnf-1").unwrap();
        Fixture { ca, host, csr }
    }

    fn request(f: &Fixture) -> EnrollmentRequest {
        let nonce = f.ca.issue_nonce();
        let (quote, measurement_list) = f.host.attest(&nonce, &[10]).unwrap();
        EnrollmentRequest {
            quote,
            measurement_list,
            csr: f.csr.clone(),
        }
    }

    #[test]
    fn nonces_are_fresh_and_recorded() {
        let f = fixture(CaConfig::default());
        let a = f.ca.issue_nonce();
        let b = f.ca.issue_nonce();
        assert_ne!(a, b);
        assert_eq!(a.len(), 32);
        let rec = f.ca.nonce_record(&a).unwrap();
        assert!(!rec.consumed);
    }

    #[test]
    fn clean_request_enrolls_and_replay_is_rejected() {
        let f = fixture(CaConfig::default());
        let req = request(&f);
        let cert = f.ca.enroll(&req).unwrap();
        assert!(pki::chains_to(&cert, f.ca.root_certificate()));
        assert!(f.ca.nonce_record(&req.quote.nonce).unwrap().consumed);
        assert_eq!(f.ca.enroll(&req).unwrap_err(), RejectionReason::Nonce);
    }

    #[test]
    fn unregistered_file_is_unknown_measurement() {
        let f = fixture(CaConfig::default());
        f.host.measure("/tmp/implant", b"payload").unwrap();
        assert_eq!(f.ca.enroll(&request(&f)).unwrap_err(), RejectionReason::UnknownMeasurement);
    }

    #[test]
    fn expired_nonce_rejected() {
        let f = fixture(CaConfig {
            nonce_ttl: Duration::from_millis(20),
            ..CaConfig::default()
        });
        let req = request(&f);
        std::thread::sleep(Duration::from_millis(40));
        assert_eq!(f.ca.enroll(&req).unwrap_err(), RejectionReason::Nonce);
    }

    #[test]
    fn quote_over_wrong_registers_is_pcr_mismatch() {
        let f = fixture(CaConfig::default());
        let nonce = f.ca.issue_nonce();
        let (quote, measurement_list) = f.host.attest(&nonce, &[11]).unwrap();
        let req = EnrollmentRequest {
            quote,
            measurement_list,
            csr: f.csr.clone(),
        };
        assert_eq!(f.ca.enroll(&req).unwrap_err(), RejectionReason::PcrMismatch);
    }

    #[test]
    fn extra_selected_register_must_replay_too() {
        let f = fixture(CaConfig::default());
        let nonce = f.ca.issue_nonce();
        let (quote, measurement_list) = f.host.attest(&nonce, &[10, 11]).unwrap();
        let req = EnrollmentRequest {
            quote,
            measurement_list,
            csr: f.csr.clone(),
        };
        // PCR 11 is untouched on both sides, so the composite still matches.
        assert!(f.ca.enroll(&req).is_ok());
    }

    #[test]
    fn controller_certificates_skip_attestation() {
        let f = fixture(CaConfig::default());
        let cert = f.ca.issue_controller_certificate(&f.csr).unwrap();
        assert!(pki::chains_to(&cert, f.ca.root_certificate()));
        assert_eq!(
            f.ca.issue_controller_certificate(b"garbage").unwrap_err(),
            RejectionReason::BadCsr
        );
    }

    #[test]
    fn root_certificate_is_stable_and_self_signed() {
        let f = fixture(CaConfig::default());
        let a = f.ca.root_certificate().to_der().unwrap();
        let b = f.ca.root_certificate().to_der().unwrap();
        assert_eq!(a, b);
        let root = f.ca.root_certificate();
        assert!(root.verify(&root.public_key().unwrap()).unwrap());
    }

    #[test]
    fn request_encoding_round_trips() {
        let f = fixture(CaConfig::default());
        let req = request(&f);
        let bytes = req.encode();
        assert_eq!(bytes[0], MSG_ENROLL);
        assert_eq!(EnrollmentRequest::decode(&bytes).unwrap(), req);
        assert!(EnrollmentRequest::decode(&bytes[..bytes.len() - 1]).is_none());
    }

    #[test]
    fn wire_protocol() {
        let f = fixture(CaConfig::default());
        let resp = f.ca.handle_message(&[MSG_NONCE_REQUEST]);
        assert_eq!(resp[0], MSG_NONCE);
        assert_eq!(resp.len(), 33);
        assert_eq!(f.ca.handle_message(&[0x55]), vec![MSG_REJECT, 0x7F]);
        assert_eq!(f.ca.handle_message(&[MSG_ENROLL, 1, 2]), vec![MSG_REJECT, 0x7F]);
        assert_eq!(f.ca.handle_admin_message(&[MSG_CONTROLLER_CSR, 1]), vec![MSG_REJECT, RejectionReason::BadCsr as u8]);
    }

    #[test]
    fn known_good_text_round_trip() {
        let f = fixture(CaConfig::default());
        let text = f.ca.known_good().serialize();
        let parsed = KnownGoodConfig::parse(&text).unwrap();
        assert_eq!(parsed.serialize(), text);
        assert!(text.contains("require /usr/sbin/ovs-vswitchd\n"));
        assert!(matches!(
            KnownGoodConfig::parse("require /not/allowed\n"),
            Err(KnownGoodError::Parse { line: 1, .. })
        ));
        assert!(KnownGoodConfig::parse("bogus x\n").is_err());
        assert!(KnownGoodConfig::parse("# comment\n\n").is_ok());
    }

    #[test]
    fn required_paths_must_be_allowlisted() {
        let mut kg = KnownGoodConfig::new();
        assert_eq!(
            kg.require("/x").unwrap_err(),
            KnownGoodError::RequiredWithoutAllowed("/x".into())
        );
        kg.allow_content("/x", b"1");
        assert!(kg.require("/x").is_ok());
    }
}
