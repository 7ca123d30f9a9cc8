//! Host-local attestation agent.
//!
//! Proxies quote and measurement-list requests from co-located workloads to
//! the host's root of trust. The agent listens only on loopback or Unix
//! endpoints and additionally refuses any connection whose peer address is
//! not local. It holds no CA address and never opens outbound connections.
//!
//! Protocol (each message framed as `len(4) || body`):
//!
//! ```text
//! request  = 0x01 || nonce(32)
//! response = 0x01 || quote_len(2) || quote || list_len(4) || list
//! error    = 0xFF || code(1)
//! ```

use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::measurement_log::MeasurementList;
use crate::platform::HostPlatform;
use crate::root_of_trust::{parse_selection, Nonce, Quote};
use crate::service::{self, ServiceHandle};
use crate::wire::{self, Reader};

pub const MSG_ATTEST: u8 = 0x01;
pub const MSG_ERROR: u8 = 0xFF;

const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AgentErrorCode {
    Malformed = 0x01,
    UnknownRequest = 0x02,
    QuoteFailed = 0x03,
    NotLocal = 0x04,
}

impl AgentErrorCode {
    pub fn from_byte(b: u8) -> Option<AgentErrorCode> {
        Some(match b {
            0x01 => AgentErrorCode::Malformed,
            0x02 => AgentErrorCode::UnknownRequest,
            0x03 => AgentErrorCode::QuoteFailed,
            0x04 => AgentErrorCode::NotLocal,
            _ => return None,
        })
    }
}

/// An address that can only be reached from the same host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocalEndpoint {
    Loopback(SocketAddr),
    Unix(PathBuf),
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("endpoint {0} is not host-local")]
    NotLocal(String),
    #[error("invalid endpoint {0:?}")]
    BadEndpoint(String),
    #[error("invalid PCR selection: {0}")]
    Selection(String),
    #[error("bind failed: {0}")]
    Bind(#[from] io::Error),
}

impl LocalEndpoint {
    pub fn loopback(addr: SocketAddr) -> Result<LocalEndpoint, AgentError> {
        if addr.ip().is_loopback() {
            Ok(LocalEndpoint::Loopback(addr))
        } else {
            Err(AgentError::NotLocal(addr.to_string()))
        }
    }
}

impl FromStr for LocalEndpoint {
    type Err = AgentError;

    /// `unix:/path/to/socket` or a loopback `ip:port`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("unix:") {
            if path.is_empty() {
                return Err(AgentError::BadEndpoint(s.to_string()));
            }
            return Ok(LocalEndpoint::Unix(PathBuf::from(path)));
        }
        let addr: SocketAddr = s.parse().map_err(|_| AgentError::BadEndpoint(s.to_string()))?;
        LocalEndpoint::loopback(addr)
    }
}

impl fmt::Display for LocalEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalEndpoint::Loopback(a) => write!(f, "{a}"),
            LocalEndpoint::Unix(p) => write!(f, "unix:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub host_id: String,
    bound_endpoint: LocalEndpoint,
    pcr_selection: Vec<usize>,
}

impl AgentConfig {
    pub fn new(host_id: &str, bound_endpoint: LocalEndpoint, pcr_selection: Vec<usize>) -> Result<AgentConfig, AgentError> {
        if let LocalEndpoint::Loopback(a) = &bound_endpoint {
            if !a.ip().is_loopback() {
                return Err(AgentError::NotLocal(a.to_string()));
            }
        }
        parse_selection(&pcr_selection).map_err(|e| AgentError::Selection(e.to_string()))?;
        Ok(AgentConfig {
            host_id: host_id.to_string(),
            bound_endpoint,
            pcr_selection,
        })
    }

    pub fn bound_endpoint(&self) -> &LocalEndpoint {
        &self.bound_endpoint
    }

    pub fn pcr_selection(&self) -> &[usize] {
        &self.pcr_selection
    }
}

/// Where a connection came from, as reported by the transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerOrigin {
    Tcp(SocketAddr),
    Unix,
}

impl PeerOrigin {
    pub fn is_local(&self) -> bool {
        match self {
            PeerOrigin::Tcp(a) => a.ip().is_loopback(),
            PeerOrigin::Unix => true,
        }
    }
}

pub struct AttestationAgent {
    config: AgentConfig,
    host: Arc<HostPlatform>,
}

impl AttestationAgent {
    pub fn new(config: AgentConfig, host: Arc<HostPlatform>) -> AttestationAgent {
        AttestationAgent { config, host }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Quote over the configured selection bound to `nonce`, plus a live
    /// snapshot of the measurement list.
    pub fn handle_attestation_request(&self, nonce: &[u8]) -> Result<(Quote, MeasurementList), AgentErrorCode> {
        let nonce: Nonce = nonce.try_into().map_err(|_| AgentErrorCode::Malformed)?;
        self.host
            .attest(&nonce, &self.config.pcr_selection)
            .map_err(|_| AgentErrorCode::QuoteFailed)
    }

    /// Processes one framed request body and returns the response body.
    pub fn handle_message(&self, body: &[u8], origin: PeerOrigin) -> Vec<u8> {
        if !origin.is_local() {
            return error_body(AgentErrorCode::NotLocal);
        }
        let mut r = Reader::new(body);
        match r.u8() {
            Ok(MSG_ATTEST) => match self.handle_attestation_request(r.rest()) {
                Ok((quote, list)) => encode_response(&quote, &list),
                Err(code) => error_body(code),
            },
            Ok(_) => error_body(AgentErrorCode::UnknownRequest),
            Err(_) => error_body(AgentErrorCode::Malformed),
        }
    }

    /// Serves one connection until the peer hangs up. Non-local peers get a
    /// single `NotLocal` error and are disconnected.
    pub fn serve_connection(&self, stream: &mut (impl Read + Write), origin: PeerOrigin) {
        if !origin.is_local() {
            log::warn!("agent {}: refusing non-local peer {origin:?}", self.config.host_id);
            let _ = wire::write_frame(stream, &error_body(AgentErrorCode::NotLocal));
            return;
        }
        while let Ok(body) = wire::read_frame(stream) {
            let resp = self.handle_message(&body, origin);
            if wire::write_frame(stream, &resp).is_err() {
                break;
            }
        }
    }

    pub fn serve(self: Arc<Self>) -> Result<ServiceHandle, AgentError> {
        match self.config.bound_endpoint.clone() {
            LocalEndpoint::Loopback(addr) => {
                let listener = TcpListener::bind(addr)?;
                let agent = self.clone();
                Ok(service::spawn_tcp(listener, "attestation-agent", move |mut s, peer| {
                    let _ = s.set_read_timeout(Some(IO_TIMEOUT));
                    agent.serve_connection(&mut s, PeerOrigin::Tcp(peer));
                })?)
            }
            LocalEndpoint::Unix(path) => {
                let listener = UnixListener::bind(&path)?;
                let agent = self.clone();
                Ok(service::spawn_unix(listener, path, "attestation-agent", move |mut s| {
                    let _ = s.set_read_timeout(Some(IO_TIMEOUT));
                    agent.serve_connection(&mut s, PeerOrigin::Unix);
                })?)
            }
        }
    }
}

fn error_body(code: AgentErrorCode) -> Vec<u8> {
    vec![MSG_ERROR, code as u8]
}

pub fn encode_response(quote: &Quote, list: &MeasurementList) -> Vec<u8> {
    let q = quote.encode();
    let l = list.serialize().into_bytes();
    let mut out = Vec::with_capacity(1 + 2 + q.len() + 4 + l.len());
    out.push(MSG_ATTEST);
    out.extend_from_slice(&(q.len() as u16).to_be_bytes());
    out.extend_from_slice(&q);
    out.extend_from_slice(&(l.len() as u32).to_be_bytes());
    out.extend_from_slice(&l);
    out
}

pub fn encode_request(nonce: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + nonce.len());
    out.push(MSG_ATTEST);
    out.extend_from_slice(nonce);
    out
}

#[derive(Debug, Error)]
pub enum AgentClientError {
    #[error("agent unreachable: {0}")]
    Unreachable(io::Error),
    #[error("agent refused the connection")]
    Refused,
    #[error("agent returned error {0:?}")]
    Remote(Option<AgentErrorCode>),
    #[error("malformed agent response: {0}")]
    Protocol(String),
}

pub fn decode_response(body: &[u8]) -> Result<(Quote, MeasurementList), AgentClientError> {
    let bad = |what: &str| AgentClientError::Protocol(what.to_string());
    let mut r = Reader::new(body);
    match r.u8().map_err(|_| bad("empty response"))? {
        MSG_ATTEST => {}
        MSG_ERROR => {
            let code = r.u8().ok().and_then(AgentErrorCode::from_byte);
            return Err(if code == Some(AgentErrorCode::NotLocal) {
                AgentClientError::Refused
            } else {
                AgentClientError::Remote(code)
            });
        }
        _ => return Err(bad("unknown response type")),
    }
    let qlen = r.u16().map_err(|_| bad("truncated"))? as usize;
    let quote = Quote::decode(r.take(qlen).map_err(|_| bad("truncated quote"))?)
        .map_err(|e| AgentClientError::Protocol(e.to_string()))?;
    let llen = r.u32().map_err(|_| bad("truncated"))? as usize;
    let text = std::str::from_utf8(r.take(llen).map_err(|_| bad("truncated list"))?)
        .map_err(|_| bad("list is not UTF-8"))?;
    let list = MeasurementList::parse(text).map_err(|e| AgentClientError::Protocol(e.to_string()))?;
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((quote, list))
}

enum LocalStream {
    Tcp(TcpStream),
    Unix(UnixStream),
}

impl Read for LocalStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            LocalStream::Tcp(s) => s.read(buf),
            LocalStream::Unix(s) => s.read(buf),
        }
    }
}

impl Write for LocalStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            LocalStream::Tcp(s) => s.write(buf),
            LocalStream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            LocalStream::Tcp(s) => s.flush(),
            LocalStream::Unix(s) => s.flush(),
        }
    }
}

fn connect(endpoint: &LocalEndpoint) -> io::Result<LocalStream> {
    Ok(match endpoint {
        LocalEndpoint::Loopback(a) => {
            let s = TcpStream::connect_timeout(a, IO_TIMEOUT)?;
            s.set_read_timeout(Some(IO_TIMEOUT))?;
            s.set_nodelay(true)?;
            LocalStream::Tcp(s)
        }
        LocalEndpoint::Unix(p) => {
            let s = UnixStream::connect(p)?;
            s.set_read_timeout(Some(IO_TIMEOUT))?;
            LocalStream::Unix(s)
        }
    })
}

/// Sends a raw request body and returns the raw response body.
pub fn exchange(endpoint: &LocalEndpoint, body: &[u8]) -> Result<Vec<u8>, AgentClientError> {
    let mut s = connect(endpoint).map_err(AgentClientError::Unreachable)?;
    wire::write_frame(&mut s, body).map_err(AgentClientError::Unreachable)?;
    wire::read_frame(&mut s).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset => AgentClientError::Refused,
        _ => AgentClientError::Unreachable(e),
    })
}

/// Asks the local agent for a quote over `nonce`.
pub fn request_evidence(endpoint: &LocalEndpoint, nonce: &Nonce) -> Result<(Quote, MeasurementList), AgentClientError> {
    decode_response(&exchange(endpoint, &encode_request(nonce))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement_log::DEFAULT_MEASUREMENT_PCR;
    use crate::platform::HostManifest;
    use crate::rng::seeded;
    use crate::root_of_trust::{pcr_composite, verify_quote, AttestationIdentity};

    fn agent() -> AttestationAgent {
        let host = HostManifest::reference()
            .boot(AttestationIdentity::generate(&mut seeded("t", "agent")), DEFAULT_MEASUREMENT_PCR)
            .unwrap();
        let cfg = AgentConfig::new("h1", "127.0.0.1:0".parse().unwrap(), vec![10]).unwrap();
        AttestationAgent::new(cfg, Arc::new(host))
    }

    #[test]
    fn local_request_round_trip() {
        let a = agent();
        let nonce = [5u8; 32];
        let body = a.handle_message(&encode_request(&nonce), PeerOrigin::Tcp("127.0.0.1:4000".parse().unwrap()));
        let (quote, list) = decode_response(&body).unwrap();
        assert!(verify_quote(&quote, &nonce, a.host.attestation_key()));
        assert_eq!(quote.composite, pcr_composite([&list.replay()]));
    }

    #[test]
    fn non_local_origin_refused() {
        let a = agent();
        let body = a.handle_message(&encode_request(&[0; 32]), PeerOrigin::Tcp("10.0.0.7:4000".parse().unwrap()));
        assert!(matches!(decode_response(&body), Err(AgentClientError::Refused)));

        let mut conn = std::io::Cursor::new(Vec::new());
        a.serve_connection(&mut conn, PeerOrigin::Tcp("192.168.1.2:1".parse().unwrap()));
        assert_eq!(conn.into_inner(), vec![0, 0, 0, 2, MSG_ERROR, AgentErrorCode::NotLocal as u8]);
    }

    #[test]
    fn short_nonce_is_protocol_error() {
        let a = agent();
        let body = a.handle_message(&encode_request(&[0; 16]), PeerOrigin::Unix);
        assert_eq!(body, vec![MSG_ERROR, AgentErrorCode::Malformed as u8]);
        let body = a.handle_message(&[0x42], PeerOrigin::Unix);
        assert_eq!(body, vec![MSG_ERROR, AgentErrorCode::UnknownRequest as u8]);
        assert_eq!(a.handle_message(&[], PeerOrigin::Unix), vec![MSG_ERROR, 0x01]);
    }

    #[test]
    fn endpoints_must_be_local() {
        assert!("0.0.0.0:7000".parse::<LocalEndpoint>().is_err());
        assert!("192.168.0.1:7000".parse::<LocalEndpoint>().is_err());
        assert!("[::1]:7000".parse::<LocalEndpoint>().is_ok());
        assert_eq!(
            "unix:/tmp/agent.sock".parse::<LocalEndpoint>().unwrap(),
            LocalEndpoint::Unix("/tmp/agent.sock".into())
        );
        assert!("unix:".parse::<LocalEndpoint>().is_err());
        assert!(AgentConfig::new("h", "127.0.0.1:1".parse().unwrap(), vec![]).is_err());
    }

    #[test]
    fn serves_over_loopback_and_unix() {
        let a = Arc::new(agent());
        let svc = a.clone().serve().unwrap();
        let ep = LocalEndpoint::Loopback(svc.local_addr());
        let (q, _) = request_evidence(&ep, &[8; 32]).unwrap();
        assert_eq!(q.nonce, [8; 32]);
        drop(svc);

        let dir = std::env::temp_dir().join(format!("tp-agent-{}", std::process::id()));
        let _ = std::fs::remove_file(&dir);
        let cfg = AgentConfig::new("h1", LocalEndpoint::Unix(dir.clone()), vec![10]).unwrap();
        let unix_agent = Arc::new(AttestationAgent::new(cfg, a.host.clone()));
        let svc = unix_agent.serve().unwrap();
        let (q, list) = request_evidence(&LocalEndpoint::Unix(dir), &[9; 32]).unwrap();
        assert_eq!(q.nonce, [9; 32]);
        assert!(!list.is_empty());
        drop(svc);
    }

    #[test]
    fn unreachable_agent_reports_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let err = request_evidence(&LocalEndpoint::Loopback(port), &[0; 32]).unwrap_err();
        assert!(matches!(err, AgentClientError::Unreachable(_)));
    }
}
