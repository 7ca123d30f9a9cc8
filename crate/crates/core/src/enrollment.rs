//! Client side of attestation-gated enrollment.
//!
//! [`run_enrollment`] drives one session through
//! `INIT → NONCE_RECEIVED → EVIDENCE_COLLECTED → KEYED → SUBMITTED → ENROLLED`:
//!
//! 1. request a nonce from the CA;
//! 2. ask the local agent for a quote and measurement list over it;
//! 3. have the compartment generate a keypair and a CSR;
//! 4. submit quote, list and CSR to the CA;
//! 5. install the returned certificate in the compartment.
//!
//! Any failure moves the session to `FAILED` and discards the pending key,
//! so the compartment can be initialized again. The private key never
//! leaves the compartment; this module only sees the CSR bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::attestation_agent::{request_evidence, AgentClientError, LocalEndpoint};
use crate::enclave_tls::Compartment;
use crate::extended_ca::{request_nonce, submit_enrollment, EnrollmentRequest, RejectionReason};
use crate::measurement_log::MeasurementList;
use crate::root_of_trust::{Nonce, Quote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnrollmentState {
    Init,
    NonceReceived,
    EvidenceCollected,
    Keyed,
    Submitted,
    Enrolled,
    Failed,
}

impl EnrollmentState {
    pub fn is_terminal(self) -> bool {
        matches!(self, EnrollmentState::Enrolled | EnrollmentState::Failed)
    }

    /// Forward edges of the session machine. `FAILED` is reachable from
    /// every non-terminal state.
    pub fn can_transition_to(self, next: EnrollmentState) -> bool {
        use EnrollmentState::*;
        match (self, next) {
            (s, Failed) => !s.is_terminal(),
            (Init, NonceReceived)
            | (NonceReceived, EvidenceCollected)
            | (EvidenceCollected, Keyed)
            | (Keyed, Submitted)
            | (Submitted, Enrolled) => true,
            _ => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnrollmentState::Init => "INIT",
            EnrollmentState::NonceReceived => "NONCE_RECEIVED",
            EnrollmentState::EvidenceCollected => "EVIDENCE_COLLECTED",
            EnrollmentState::Keyed => "KEYED",
            EnrollmentState::Submitted => "SUBMITTED",
            EnrollmentState::Enrolled => "ENROLLED",
            EnrollmentState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for EnrollmentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureReason {
    CaUnreachable(String),
    AgentUnreachable(String),
    AgentProtocol(String),
    /// The agent refused a non-local caller.
    AgentRefused,
    Rejected(RejectionReason),
    CaProtocol,
    CertificateInvalid(String),
    Compartment(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::CaUnreachable(e) => write!(f, "CA unreachable: {e}"),
            FailureReason::AgentUnreachable(e) => write!(f, "agent unreachable: {e}"),
            FailureReason::AgentProtocol(e) => write!(f, "agent protocol error: {e}"),
            FailureReason::AgentRefused => f.write_str("agent refused the request"),
            FailureReason::Rejected(r) => write!(f, "rejected by CA: {}", r.name()),
            FailureReason::CaProtocol => f.write_str("malformed CA response"),
            FailureReason::CertificateInvalid(e) => write!(f, "issued certificate unusable: {e}"),
            FailureReason::Compartment(e) => write!(f, "compartment error: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    /// The state the session was trying to enter.
    pub attempted: EnrollmentState,
    pub reason: FailureReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Nonce,
    TpmQuote,
    KeyGeneration,
    CsrSigning,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Nonce, Stage::TpmQuote, Stage::KeyGeneration, Stage::CsrSigning, Stage::Total];
    /// Rows of the attestation timing table, in order.
    pub const REPORTED: [Stage; 4] = [Stage::TpmQuote, Stage::KeyGeneration, Stage::CsrSigning, Stage::Total];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Nonce => "Nonce",
            Stage::TpmQuote => "TPM quote",
            Stage::KeyGeneration => "Key generation",
            Stage::CsrSigning => "CSR signing",
            Stage::Total => "Total attestation time",
        }
    }
}

/// Client-side fault injection. `Measurement` tampering happens on the host
/// (a modified binary is measured) and is a no-op here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tamper {
    #[default]
    None,
    Measurement,
    QuoteSignature,
    NonceReplay,
    Csr,
}

impl Tamper {
    pub const ALL: [Tamper; 5] = [
        Tamper::None,
        Tamper::Measurement,
        Tamper::QuoteSignature,
        Tamper::NonceReplay,
        Tamper::Csr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tamper::None => "none",
            Tamper::Measurement => "measurement",
            Tamper::QuoteSignature => "quote-sig",
            Tamper::NonceReplay => "nonce-replay",
            Tamper::Csr => "csr",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown tamper directive {0:?}")]
pub struct UnknownTamper(pub String);

impl FromStr for Tamper {
    type Err = UnknownTamper;

    fn from_str(s: &str) -> Result<Tamper, UnknownTamper> {
        Tamper::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| UnknownTamper(s.to_string()))
    }
}

impl fmt::Display for Tamper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default)]
pub struct EnrollmentOptions {
    pub tamper: Tamper,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("session still in progress ({0})")]
pub struct SessionInProgress(pub EnrollmentState);

#[derive(Debug, Clone)]
pub struct EnrollmentSession {
    state: EnrollmentState,
    history: Vec<EnrollmentState>,
    nonce: Option<Nonce>,
    evidence: Option<(Quote, MeasurementList)>,
    certificate: Option<Vec<u8>>,
    failure: Option<Failure>,
    timings: BTreeMap<Stage, Duration>,
}

impl EnrollmentSession {
    fn new() -> EnrollmentSession {
        EnrollmentSession {
            state: EnrollmentState::Init,
            history: vec![EnrollmentState::Init],
            nonce: None,
            evidence: None,
            certificate: None,
            failure: None,
            timings: BTreeMap::new(),
        }
    }

    fn advance(&mut self, next: EnrollmentState) {
        assert!(self.state.can_transition_to(next), "{} -> {}", self.state, next);
        self.state = next;
        self.history.push(next);
    }

    fn fail(&mut self, attempted: EnrollmentState, reason: FailureReason) {
        self.failure = Some(Failure { attempted, reason });
        self.advance(EnrollmentState::Failed);
    }

    pub fn state(&self) -> EnrollmentState {
        self.state
    }

    /// Every state visited, starting with `INIT`.
    pub fn history(&self) -> &[EnrollmentState] {
        &self.history
    }

    pub fn is_enrolled(&self) -> bool {
        self.state == EnrollmentState::Enrolled
    }

    pub fn nonce(&self) -> Option<&Nonce> {
        self.nonce.as_ref()
    }

    pub fn evidence(&self) -> Option<&(Quote, MeasurementList)> {
        self.evidence.as_ref()
    }

    /// DER certificate issued to the compartment, if enrolled.
    pub fn certificate(&self) -> Option<&[u8]> {
        self.certificate.as_deref()
    }

    pub fn failure(&self) -> Option<&Failure> {
        self.failure.as_ref()
    }

    pub fn rejection(&self) -> Option<RejectionReason> {
        match self.failure {
            Some(Failure {
                reason: FailureReason::Rejected(r),
                ..
            }) => Some(r),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        match &self.failure {
            Some(f) => format!("{} while entering {}: {}", self.state, f.attempted, f.reason),
            None => self.state.to_string(),
        }
    }

    /// Per-stage wall time. Stages a failed session never reached are
    /// absent; `Total` is always present.
    pub fn stage_timings(&self) -> Result<BTreeMap<Stage, Duration>, SessionInProgress> {
        if !self.state.is_terminal() {
            return Err(SessionInProgress(self.state));
        }
        Ok(self.timings.clone())
    }
}

pub fn stage_timings(session: &EnrollmentSession) -> Result<BTreeMap<Stage, Duration>, SessionInProgress> {
    session.stage_timings()
}

fn timed<T>(timings: &mut BTreeMap<Stage, Duration>, stage: Stage, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.insert(stage, start.elapsed().max(Duration::from_nanos(1)));
    out
}

pub fn run_enrollment(ca: SocketAddr, agent: &LocalEndpoint, compartment: &Compartment) -> EnrollmentSession {
    run_enrollment_with(ca, agent, compartment, &EnrollmentOptions::default())
}

pub fn run_enrollment_with(
    ca: SocketAddr,
    agent: &LocalEndpoint,
    compartment: &Compartment,
    options: &EnrollmentOptions,
) -> EnrollmentSession {
    let start = Instant::now();
    let mut session = EnrollmentSession::new();
    if let Err(e) = compartment.begin_enrollment() {
        session.fail(EnrollmentState::NonceReceived, FailureReason::Compartment(e.to_string()));
        session.timings.insert(Stage::Total, start.elapsed().max(Duration::from_nanos(1)));
        return session;
    }
    drive(&mut session, ca, agent, compartment, options);
    if !session.is_enrolled() {
        compartment.abort_enrollment();
    }
    session.timings.insert(Stage::Total, start.elapsed().max(Duration::from_nanos(1)));
    session
}

fn drive(
    session: &mut EnrollmentSession,
    ca: SocketAddr,
    agent: &LocalEndpoint,
    compartment: &Compartment,
    options: &EnrollmentOptions,
) {
    use EnrollmentState::*;

    let nonce = match timed(&mut session.timings, Stage::Nonce, || request_nonce(&ca)) {
        Ok(n) => n,
        Err(e) => return session.fail(NonceReceived, FailureReason::CaUnreachable(e.to_string())),
    };
    session.nonce = Some(nonce);
    session.advance(NonceReceived);

    let (mut quote, list) = match timed(&mut session.timings, Stage::TpmQuote, || request_evidence(agent, &nonce)) {
        Ok(ev) => ev,
        Err(e) => {
            let reason = match e {
                AgentClientError::Unreachable(io) => FailureReason::AgentUnreachable(io.to_string()),
                AgentClientError::Refused => FailureReason::AgentRefused,
                other => FailureReason::AgentProtocol(other.to_string()),
            };
            return session.fail(EvidenceCollected, reason);
        }
    };
    if quote.nonce != nonce {
        return session.fail(
            EvidenceCollected,
            FailureReason::AgentProtocol("quote does not carry the CA nonce".into()),
        );
    }
    if options.tamper == Tamper::QuoteSignature {
        if let Some(b) = quote.signature.last_mut() {
            *b ^= 0x01;
        }
    }
    session.evidence = Some((quote.clone(), list.clone()));
    session.advance(EvidenceCollected);

    if let Err(e) = timed(&mut session.timings, Stage::KeyGeneration, || compartment.generate_keypair()) {
        return session.fail(Keyed, FailureReason::Compartment(e.to_string()));
    }
    let mut csr = match timed(&mut session.timings, Stage::CsrSigning, || compartment.create_csr()) {
        Ok(c) => c,
        Err(e) => return session.fail(Keyed, FailureReason::Compartment(e.to_string())),
    };
    if options.tamper == Tamper::Csr {
        if let Some(b) = csr.last_mut() {
            *b ^= 0x01;
        }
    }
    session.advance(Keyed);

    let request = EnrollmentRequest {
        quote,
        measurement_list: list,
        csr,
    };
    if options.tamper == Tamper::NonceReplay {
        // The first submission consumes the nonce; its certificate is
        // discarded and the verbatim resubmission decides the session.
        if let Err(e) = submit_enrollment(&ca, &request) {
            return session.fail(Submitted, FailureReason::CaUnreachable(e.to_string()));
        }
    }
    let verdict = match submit_enrollment(&ca, &request) {
        Ok(v) => v,
        Err(crate::extended_ca::CaClientError::Protocol) => return session.fail(Submitted, FailureReason::CaProtocol),
        Err(e) => return session.fail(Submitted, FailureReason::CaUnreachable(e.to_string())),
    };
    session.advance(Submitted);

    let der = match verdict {
        Ok(der) => der,
        Err(reason) => return session.fail(Enrolled, FailureReason::Rejected(reason)),
    };
    if let Err(e) = compartment.install_certificate(&der) {
        return session.fail(Enrolled, FailureReason::CertificateInvalid(e.to_string()));
    }
    session.certificate = Some(der);
    session.advance(Enrolled);
}
