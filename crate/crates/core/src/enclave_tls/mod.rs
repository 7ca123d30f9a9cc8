//! Credential-isolating TLS compartment.
//!
//! A [`Compartment`] owns one RSA keypair, the CA-signed certificate for it
//! and every TLS session built on top. Callers hold only opaque
//! [`TlsContextHandle`]s and talk to the compartment through the ECALL-shaped
//! operations below; no operation returns key material or session secrets.
//!
//! Sessions are TLS 1.2 clients with mutual authentication against the
//! provisioned CA root. Transports are driven non-blocking, so a read with
//! no pending application data returns a negative value and
//! [`Compartment::ssl_get_error`] reports [`SslError::WantRead`].

mod policy;
mod transport;

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use openssl::error::ErrorStack;
use openssl::pkey::{PKey, Private};
use openssl::ssl::{
    ErrorCode, HandshakeError, Ssl, SslContext, SslContextBuilder, SslMethod, SslOptions, SslSessionCacheMode,
    SslStream, SslVerifyMode, SslVersion,
};
use openssl::x509::X509;
use thiserror::Error;

use crate::attestation_agent::LocalEndpoint;
use crate::enrollment::{self, EnrollmentOptions, EnrollmentSession};
use crate::pki;

pub use policy::{CipherPolicy, CipherSuite, EmptyPolicy};
pub use transport::{tls_records, BoundaryCapture, CapturedTransport, Transport};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const HANDSHAKE_POLL: Duration = Duration::from_micros(50);
const MASTER_SECRET_LEN: usize = 48;

static NEXT_INSTANCE: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SslState {
    Handshaking,
    Established,
    Closed,
    Error,
}

impl SslState {
    pub fn can_transition_to(self, next: SslState) -> bool {
        matches!(
            (self, next),
            (SslState::Handshaking, SslState::Established)
                | (SslState::Handshaking, SslState::Error)
                | (SslState::Established, SslState::Closed)
                | (SslState::Established, SslState::Error)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SslError {
    None,
    WantRead,
    WantWrite,
    Syscall,
    SslFailure,
}

/// Opaque session token. The upper half names the issuing compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlsContextHandle(u64);

impl TlsContextHandle {
    pub fn id(self) -> u64 {
        self.0
    }

    fn instance(self) -> u32 {
        (self.0 >> 32) as u32
    }
}

impl fmt::Display for TlsContextHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx#{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EcallKind {
    Read,
    Write,
    GetState,
    GetError,
}

impl EcallKind {
    pub const ALL: [EcallKind; 4] = [EcallKind::Read, EcallKind::Write, EcallKind::GetState, EcallKind::GetError];

    pub fn name(self) -> &'static str {
        match self {
            EcallKind::Read => "ecall_ssl_read",
            EcallKind::Write => "ecall_ssl_write",
            EcallKind::GetState => "ecall_ssl_get_state",
            EcallKind::GetError => "ecall_ssl_get_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EcallRecord {
    pub kind: EcallKind,
    /// Always at least 1 ns.
    pub duration: Duration,
}

#[derive(Debug, Clone)]
pub struct CompartmentConfig {
    pub common_name: String,
    pub trace_ecalls: bool,
}

impl CompartmentConfig {
    pub fn new(common_name: &str) -> CompartmentConfig {
        CompartmentConfig {
            common_name: common_name.to_string(),
            trace_ecalls: false,
        }
    }

    pub fn with_tracing(mut self, on: bool) -> CompartmentConfig {
        self.trace_ecalls = on;
        self
    }
}

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("compartment already initialized")]
    AlreadyInitialized,
    #[error("compartment not initialized")]
    NotInitialized,
    #[error("an enrollment is already in progress")]
    EnrollmentInProgress,
    #[error("no enrollment in progress")]
    NoEnrollment,
    #[error("no keypair generated for this enrollment")]
    NoPendingKey,
    #[error("certificate does not match the compartment key")]
    CertificateKeyMismatch,
    #[error("certificate does not chain to the trusted root")]
    UntrustedCertificate,
    #[error("malformed certificate")]
    MalformedCertificate,
    #[error("initialization failed: {}", .0.describe())]
    InitFailed(Box<EnrollmentSession>),
    #[error("invalid handle {0}")]
    InvalidHandle(TlsContextHandle),
    #[error("session is {0:?}, not established")]
    NotEstablished(SslState),
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("tls setup: {0}")]
    Tls(#[from] ErrorStack),
}

#[derive(Debug)]
pub struct InitReport {
    /// Wall time from the init call until key and certificate are installed.
    pub elapsed: Duration,
    pub session: EnrollmentSession,
}

enum CredentialSlot {
    Empty,
    Enrolling { key: Option<PKey<Private>> },
    Installed { key: PKey<Private>, cert: X509, ctx: SslContext },
}

struct TlsContext {
    stream: Option<SslStream<Box<dyn Transport>>>,
    state: SslState,
    last_error: SslError,
    suite: Option<CipherSuite>,
    trace: Vec<EcallRecord>,
}

impl TlsContext {
    fn set_state(&mut self, next: SslState) {
        if self.state == next {
            return;
        }
        debug_assert!(self.state.can_transition_to(next), "{:?} -> {next:?}", self.state);
        self.state = next;
        if matches!(next, SslState::Closed | SslState::Error) {
            self.stream = None;
        }
    }

    fn fail(&mut self, error: SslError) {
        self.last_error = error;
        self.set_state(SslState::Error);
    }
}

pub struct Compartment {
    instance: u32,
    config: CompartmentConfig,
    ca_root: X509,
    policy: Mutex<CipherPolicy>,
    credentials: Mutex<CredentialSlot>,
    contexts: Mutex<HashMap<u64, Arc<Mutex<TlsContext>>>>,
    next_context: AtomicU32,
    master_secrets: Mutex<Vec<[u8; MASTER_SECRET_LEN]>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn client_context(key: &PKey<Private>, cert: &X509, ca_root: &X509, policy: &CipherPolicy) -> Result<SslContext, ErrorStack> {
    let mut b = SslContextBuilder::new(SslMethod::tls_client())?;
    b.set_min_proto_version(Some(SslVersion::TLS1_2))?;
    b.set_max_proto_version(Some(SslVersion::TLS1_2))?;
    b.set_cipher_list(&policy.cipher_list())?;
    b.set_private_key(key)?;
    b.set_certificate(cert)?;
    b.check_private_key()?;
    b.cert_store_mut().add_cert(ca_root.clone())?;
    b.set_verify(SslVerifyMode::PEER);
    b.set_session_cache_mode(SslSessionCacheMode::OFF);
    b.set_options(SslOptions::NO_TICKET);
    Ok(b.build())
}

fn is_unexpected_eof(e: &openssl::ssl::Error) -> bool {
    e.ssl_error()
        .map(|s| s.errors().iter().any(|x| x.reason().is_some_and(|r| r.contains("unexpected eof"))))
        .unwrap_or(false)
}

fn classify(e: &openssl::ssl::Error) -> SslError {
    match e.code() {
        ErrorCode::WANT_READ => SslError::WantRead,
        ErrorCode::WANT_WRITE => SslError::WantWrite,
        ErrorCode::SYSCALL => SslError::Syscall,
        _ if e.io_error().is_some() || is_unexpected_eof(e) => SslError::Syscall,
        _ => SslError::SslFailure,
    }
}

fn clamp(d: Duration) -> Duration {
    d.max(Duration::from_nanos(1))
}

impl Compartment {
    /// A fresh, uninitialized compartment trusting `ca_root`.
    pub fn new(ca_root: X509, config: CompartmentConfig) -> Compartment {
        Compartment {
            instance: NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed),
            config,
            ca_root,
            policy: Mutex::new(CipherPolicy::compatible()),
            credentials: Mutex::new(CredentialSlot::Empty),
            contexts: Mutex::new(HashMap::new()),
            next_context: AtomicU32::new(1),
            master_secrets: Mutex::new(Vec::new()),
        }
    }

    /// A compartment holding a self-signed credential that never went
    /// through enrollment. It still trusts `ca_root` for its peers.
    pub fn with_self_signed_identity(
        ca_root: X509,
        config: CompartmentConfig,
        policy: CipherPolicy,
    ) -> Result<Compartment, EnclaveError> {
        let c = Compartment::new(ca_root, config);
        let key = pki::generate_rsa_key()?;
        let cert = pki::self_signed_leaf(&key, &c.config.common_name)?;
        let ctx = client_context(&key, &cert, &c.ca_root, &policy)?;
        *lock(&c.policy) = policy;
        *lock(&c.credentials) = CredentialSlot::Installed { key, cert, ctx };
        Ok(c)
    }

    pub fn config(&self) -> &CompartmentConfig {
        &self.config
    }

    pub fn ca_root(&self) -> &X509 {
        &self.ca_root
    }

    pub fn policy(&self) -> CipherPolicy {
        lock(&self.policy).clone()
    }

    pub fn is_initialized(&self) -> bool {
        matches!(*lock(&self.credentials), CredentialSlot::Installed { .. })
    }

    /// The installed certificate. Public material only.
    pub fn certificate(&self) -> Option<X509> {
        match &*lock(&self.credentials) {
            CredentialSlot::Installed { cert, .. } => Some(cert.clone()),
            _ => None,
        }
    }

    /// Enrolls against the CA through the local agent and installs the
    /// resulting credential.
    pub fn library_init(&self, ca: SocketAddr, agent: &LocalEndpoint, policy: CipherPolicy) -> Result<InitReport, EnclaveError> {
        self.library_init_with(ca, agent, policy, &EnrollmentOptions::default())
    }

    pub fn library_init_with(
        &self,
        ca: SocketAddr,
        agent: &LocalEndpoint,
        policy: CipherPolicy,
        options: &EnrollmentOptions,
    ) -> Result<InitReport, EnclaveError> {
        let start = Instant::now();
        match &*lock(&self.credentials) {
            CredentialSlot::Empty => {}
            CredentialSlot::Enrolling { .. } => return Err(EnclaveError::EnrollmentInProgress),
            CredentialSlot::Installed { .. } => return Err(EnclaveError::AlreadyInitialized),
        }
        *lock(&self.policy) = policy;
        let session = enrollment::run_enrollment_with(ca, agent, self, options);
        if session.is_enrolled() {
            Ok(InitReport {
                elapsed: start.elapsed(),
                session,
            })
        } else {
            Err(EnclaveError::InitFailed(Box::new(session)))
        }
    }

    pub(crate) fn begin_enrollment(&self) -> Result<(), EnclaveError> {
        let mut slot = lock(&self.credentials);
        match &*slot {
            CredentialSlot::Empty => {
                *slot = CredentialSlot::Enrolling { key: None };
                Ok(())
            }
            CredentialSlot::Enrolling { .. } => Err(EnclaveError::EnrollmentInProgress),
            CredentialSlot::Installed { .. } => Err(EnclaveError::AlreadyInitialized),
        }
    }

    pub(crate) fn generate_keypair(&self) -> Result<(), EnclaveError> {
        let mut slot = lock(&self.credentials);
        match &mut *slot {
            CredentialSlot::Enrolling { key } => {
                *key = Some(pki::generate_rsa_key()?);
                Ok(())
            }
            _ => Err(EnclaveError::NoEnrollment),
        }
    }

    /// DER CSR over the pending key. Only the request leaves the compartment.
    pub(crate) fn create_csr(&self) -> Result<Vec<u8>, EnclaveError> {
        match &*lock(&self.credentials) {
            CredentialSlot::Enrolling { key: Some(key) } => Ok(pki::build_csr(key, &self.config.common_name)?),
            CredentialSlot::Enrolling { key: None } => Err(EnclaveError::NoPendingKey),
            _ => Err(EnclaveError::NoEnrollment),
        }
    }

    pub(crate) fn install_certificate(&self, der: &[u8]) -> Result<(), EnclaveError> {
        let cert = X509::from_der(der).map_err(|_| EnclaveError::MalformedCertificate)?;
        let mut slot = lock(&self.credentials);
        let key = match &mut *slot {
            CredentialSlot::Enrolling { key: Some(key) } => key,
            CredentialSlot::Enrolling { key: None } => return Err(EnclaveError::NoPendingKey),
            _ => return Err(EnclaveError::NoEnrollment),
        };
        let matches = cert.public_key().map(|p| p.public_eq(key)).unwrap_or(false);
        if !matches {
            return Err(EnclaveError::CertificateKeyMismatch);
        }
        if !pki::chains_to(&cert, &self.ca_root) {
            return Err(EnclaveError::UntrustedCertificate);
        }
        let ctx = client_context(key, &cert, &self.ca_root, &lock(&self.policy))?;
        let key = key.clone();
        *slot = CredentialSlot::Installed { key, cert, ctx };
        Ok(())
    }

    /// Discards any pending key. No-op unless an enrollment is in progress.
    pub(crate) fn abort_enrollment(&self) {
        let mut slot = lock(&self.credentials);
        if matches!(*slot, CredentialSlot::Enrolling { .. }) {
            *slot = CredentialSlot::Empty;
        }
    }

    fn new_handle(&self) -> TlsContextHandle {
        let n = self.next_context.fetch_add(1, Ordering::Relaxed);
        TlsContextHandle(((self.instance as u64) << 32) | n as u64)
    }

    fn context(&self, h: TlsContextHandle) -> Result<Arc<Mutex<TlsContext>>, EnclaveError> {
        if h.instance() != self.instance {
            return Err(EnclaveError::InvalidHandle(h));
        }
        lock(&self.contexts).get(&h.0).cloned().ok_or(EnclaveError::InvalidHandle(h))
    }

    /// Runs a client handshake over `transport`. A handshake that fails
    /// still yields a handle, whose state is [`SslState::Error`].
    pub fn ssl_new_and_connect(&self, transport: impl Transport) -> Result<TlsContextHandle, EnclaveError> {
        let ssl_ctx = match &*lock(&self.credentials) {
            CredentialSlot::Installed { ctx, .. } => ctx.clone(),
            _ => return Err(EnclaveError::NotInitialized),
        };
        let policy = self.policy();
        transport.set_nonblocking(true)?;
        let ssl = Ssl::new(&ssl_ctx)?;
        let boxed: Box<dyn Transport> = Box::new(transport);

        let mut ctx = TlsContext {
            stream: None,
            state: SslState::Handshaking,
            last_error: SslError::None,
            suite: None,
            trace: Vec::new(),
        };
        let deadline = Instant::now() + HANDSHAKE_TIMEOUT;
        let mut attempt = ssl.connect(boxed);
        let outcome = loop {
            match attempt {
                Ok(stream) => break Ok(stream),
                Err(HandshakeError::WouldBlock(mid)) => {
                    if Instant::now() >= deadline {
                        break Err(SslError::Syscall);
                    }
                    thread::sleep(HANDSHAKE_POLL);
                    attempt = mid.handshake();
                }
                Err(HandshakeError::Failure(mid)) => {
                    log::debug!("handshake failed: {}", mid.error());
                    break Err(classify(mid.error()));
                }
                Err(HandshakeError::SetupFailure(e)) => return Err(EnclaveError::Tls(e)),
            }
        };
        match outcome {
            Ok(stream) => {
                let suite = stream
                    .ssl()
                    .current_cipher()
                    .and_then(|c| CipherSuite::from_openssl_name(c.name()));
                if let Some(session) = stream.ssl().session() {
                    let mut secret = [0u8; MASTER_SECRET_LEN];
                    if session.master_key(&mut secret) == MASTER_SECRET_LEN {
                        lock(&self.master_secrets).push(secret);
                    }
                }
                ctx.suite = suite;
                match suite {
                    Some(s) if policy.permits(s) => {
                        ctx.stream = Some(stream);
                        ctx.set_state(SslState::Established);
                    }
                    _ => {
                        log::debug!("negotiated suite {suite:?} violates policy");
                        ctx.fail(SslError::SslFailure);
                    }
                }
            }
            Err(code) => ctx.fail(code),
        }
        let h = self.new_handle();
        lock(&self.contexts).insert(h.0, Arc::new(Mutex::new(ctx)));
        Ok(h)
    }

    fn traced<R>(&self, ctx: &mut TlsContext, kind: EcallKind, start: Instant, result: R) -> R {
        if self.config.trace_ecalls {
            ctx.trace.push(EcallRecord {
                kind,
                duration: clamp(start.elapsed()),
            });
        }
        result
    }

    /// Encrypts and sends `plaintext`. Returns bytes consumed, 0 for an empty
    /// buffer, or -1 when the transport would block or failed.
    pub fn ssl_write(&self, h: TlsContextHandle, plaintext: &[u8]) -> Result<i32, EnclaveError> {
        let start = Instant::now();
        let cell = self.context(h)?;
        let mut ctx = lock(&cell);
        if ctx.state != SslState::Established {
            let state = ctx.state;
            return self.traced(&mut ctx, EcallKind::Write, start, Err(EnclaveError::NotEstablished(state)));
        }
        if plaintext.is_empty() {
            ctx.last_error = SslError::None;
            return self.traced(&mut ctx, EcallKind::Write, start, Ok(0));
        }
        let inside = plaintext.to_vec();
        let stream = ctx.stream.as_mut().expect("established context has a stream");
        let ret = match stream.ssl_write(&inside) {
            Ok(n) => {
                ctx.last_error = SslError::None;
                n as i32
            }
            Err(e) => {
                let code = classify(&e);
                match code {
                    SslError::WantRead | SslError::WantWrite => ctx.last_error = code,
                    _ => ctx.fail(code),
                }
                -1
            }
        };
        self.traced(&mut ctx, EcallKind::Write, start, Ok(ret))
    }

    /// Reads up to `capacity` plaintext bytes. Returns `(n > 0, data)`, `0`
    /// once the peer has closed, or `-1` with no data pending.
    pub fn ssl_read(&self, h: TlsContextHandle, capacity: usize) -> Result<(i32, Vec<u8>), EnclaveError> {
        let start = Instant::now();
        let cell = self.context(h)?;
        let mut ctx = lock(&cell);
        let result = match ctx.state {
            SslState::Established => {
                let mut buf = vec![0u8; capacity.max(1)];
                let stream = ctx.stream.as_mut().expect("established context has a stream");
                match stream.ssl_read(&mut buf) {
                    Ok(n) => {
                        buf.truncate(n);
                        ctx.last_error = SslError::None;
                        Ok((n as i32, buf))
                    }
                    Err(e) if e.code() == ErrorCode::ZERO_RETURN => {
                        ctx.last_error = SslError::None;
                        ctx.set_state(SslState::Closed);
                        Ok((0, Vec::new()))
                    }
                    Err(e) => {
                        let code = classify(&e);
                        match code {
                            SslError::WantRead | SslError::WantWrite => ctx.last_error = code,
                            _ => ctx.fail(code),
                        }
                        Ok((-1, Vec::new()))
                    }
                }
            }
            SslState::Closed => Ok((0, Vec::new())),
            state => Err(EnclaveError::NotEstablished(state)),
        };
        self.traced(&mut ctx, EcallKind::Read, start, result)
    }

    pub fn ssl_get_state(&self, h: TlsContextHandle) -> Result<SslState, EnclaveError> {
        let start = Instant::now();
        let cell = self.context(h)?;
        let mut ctx = lock(&cell);
        let state = ctx.state;
        self.traced(&mut ctx, EcallKind::GetState, start, Ok(state))
    }

    /// Maps the return value of the last read or write on `h`.
    pub fn ssl_get_error(&self, h: TlsContextHandle, last_return: i32) -> Result<SslError, EnclaveError> {
        let start = Instant::now();
        let cell = self.context(h)?;
        let mut ctx = lock(&cell);
        let e = if last_return > 0 { SslError::None } else { ctx.last_error };
        self.traced(&mut ctx, EcallKind::GetError, start, Ok(e))
    }

    /// Drains the ECALL timing records collected for `h`. Always empty when
    /// tracing is disabled.
    pub fn boundary_trace(&self, h: TlsContextHandle) -> Result<Vec<EcallRecord>, EnclaveError> {
        let cell = self.context(h)?;
        let mut ctx = lock(&cell);
        Ok(std::mem::take(&mut ctx.trace))
    }

    /// Suite negotiated on `h`, if the handshake completed.
    pub fn negotiated_suite(&self, h: TlsContextHandle) -> Result<Option<CipherSuite>, EnclaveError> {
        let cell = self.context(h)?;
        let suite = lock(&cell).suite;
        Ok(suite)
    }

    fn secret_fingerprints(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let mut add_key = |key: &PKey<Private>| {
            if let Ok(der) = key.private_key_to_pkcs8() {
                out.push(der);
            }
            if let Ok(der) = key.private_key_to_der() {
                out.push(der);
            }
            if let Ok(rsa) = key.rsa() {
                out.push(rsa.d().to_vec());
                if let Some(p) = rsa.p() {
                    out.push(p.to_vec());
                }
                if let Some(q) = rsa.q() {
                    out.push(q.to_vec());
                }
            }
        };
        match &*lock(&self.credentials) {
            CredentialSlot::Installed { key, .. } | CredentialSlot::Enrolling { key: Some(key) } => add_key(key),
            _ => {}
        }
        out.extend(lock(&self.master_secrets).iter().map(|s| s.to_vec()));
        out
    }

    /// How many times any compartment secret (private key encodings, RSA
    /// private components, session master secrets) occurs in `haystack`.
    pub fn count_secret_occurrences(&self, haystack: &[u8]) -> usize {
        self.secret_fingerprints()
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| haystack.windows(f.len()).filter(|w| *w == f.as_slice()).count())
            .sum()
    }

    /// Number of distinct secret fingerprints the scan searches for.
    pub fn secret_fingerprint_count(&self) -> usize {
        self.secret_fingerprints().len()
    }

    /// Positive control for [`Compartment::count_secret_occurrences`]: a
    /// buffer built from each fingerprint must be detected.
    pub fn audit_self_check(&self) -> bool {
        let prints = self.secret_fingerprints();
        !prints.is_empty()
            && prints.iter().all(|f| {
                let mut buf = b"prefix".to_vec();
                buf.extend_from_slice(f);
                buf.extend_from_slice(b"suffix");
                self.count_secret_occurrences(&buf) >= 1
            })
    }
}

impl fmt::Debug for Compartment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Compartment")
            .field("instance", &self.instance)
            .field("common_name", &self.config.common_name)
            .field("initialized", &self.is_initialized())
            .finish_non_exhaustive()
    }
}
