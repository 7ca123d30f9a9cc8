//! Learning L2 controller. It answers every Packet-In with a Packet-Out
//! and never installs flows.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use openssl::error::ErrorStack;
use openssl::pkey::{PKey, Private};
use openssl::ssl::{SslAcceptor, SslMethod, SslVerifyMode, SslVersion};
use openssl::x509::X509;

use super::openflow::{self, Header, PacketIn, PacketOut, OFPP_FLOOD, OFPT_PACKET_IN};
use super::packet::{dst_mac, src_mac, Mac, BROADCAST};
use crate::service::{self, ServiceHandle};

const READ_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacTable {
    entries: HashMap<Mac, u16>,
}

impl MacTable {
    pub fn new() -> MacTable {
        MacTable::default()
    }

    /// Records the most recent port `mac` was seen on.
    pub fn learn(&mut self, mac: Mac, port: u16) {
        self.entries.insert(mac, port);
    }

    pub fn lookup(&self, mac: &Mac) -> Option<u16> {
        self.entries.get(mac).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Learns the source of the encapsulated frame and picks its output: the
/// learned port of the destination, or flood if unknown, broadcast, or
/// equal to the ingress port. Frames too short for an Ethernet address
/// pair are flooded without learning.
pub fn controller_handle_packet_in(msg: &PacketIn, table: &mut MacTable) -> PacketOut {
    let out_port = match (src_mac(&msg.data), dst_mac(&msg.data)) {
        (Some(src), Some(dst)) => {
            table.learn(src, msg.in_port);
            match table.lookup(&dst) {
                Some(p) if dst != BROADCAST && p != msg.in_port => p,
                _ => OFPP_FLOOD,
            }
        }
        _ => OFPP_FLOOD,
    };
    PacketOut {
        xid: msg.xid,
        buffer_id: msg.buffer_id,
        in_port: msg.in_port,
        out_port,
        data: msg.data.clone(),
    }
}

#[derive(Debug, Default)]
pub struct ControllerStats {
    pub sessions: AtomicU64,
    pub handshake_failures: AtomicU64,
    pub packet_ins: AtomicU64,
    pub packet_outs: AtomicU64,
    pub floods: AtomicU64,
    pub unicasts: AtomicU64,
    pub malformed: AtomicU64,
    /// Messages sent to switches, by OpenFlow type.
    sent_by_type: [AtomicU64; 32],
}

impl ControllerStats {
    pub fn sent_of_type(&self, msg_type: u8) -> u64 {
        self.sent_by_type
            .get(msg_type as usize)
            .map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn flow_mods_sent(&self) -> u64 {
        self.sent_of_type(openflow::OFPT_FLOW_MOD)
    }

    fn record_sent(&self, msg: &[u8]) {
        if let Some(c) = msg.get(1).and_then(|&t| self.sent_by_type.get(t as usize)) {
            c.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Per-datapath controller state.
#[derive(Debug, Default)]
pub struct LearningController {
    table: MacTable,
}

impl LearningController {
    pub fn new() -> LearningController {
        LearningController::default()
    }

    pub fn table(&self) -> &MacTable {
        &self.table
    }

    /// Reply to one raw message, or `None` if it is dropped.
    pub fn handle_message(&mut self, raw: &[u8], stats: &ControllerStats) -> Option<Vec<u8>> {
        let is_packet_in = Header::parse(raw).map(|h| h.msg_type == OFPT_PACKET_IN).unwrap_or(false);
        if !is_packet_in {
            stats.malformed.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        let msg = match PacketIn::decode(raw) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("dropping packet-in: {e}");
                stats.malformed.fetch_add(1, Ordering::Relaxed);
                return None;
            }
        };
        stats.packet_ins.fetch_add(1, Ordering::Relaxed);
        let out = controller_handle_packet_in(&msg, &mut self.table);
        let counter = if out.is_flood() { &stats.floods } else { &stats.unicasts };
        counter.fetch_add(1, Ordering::Relaxed);
        out.encode().ok()
    }
}

/// Serves one southbound session until the peer disconnects.
pub fn serve_session(stream: &mut (impl Read + Write), stats: &ControllerStats) -> io::Result<()> {
    let mut controller = LearningController::new();
    let mut buf = Vec::new();
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        loop {
            match openflow::take_message(&mut buf) {
                Ok(Some(raw)) => {
                    if let Some(reply) = controller.handle_message(&raw, stats) {
                        stream.write_all(&reply)?;
                        stream.flush()?;
                        stats.record_sent(&reply);
                        stats.packet_outs.fetch_add(1, Ordering::Relaxed);
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    stats.malformed.fetch_add(1, Ordering::Relaxed);
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e));
                }
            }
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

/// TLS 1.2 server requiring a client certificate that chains to `ca_root`.
pub fn controller_acceptor(
    key: &PKey<Private>,
    cert: &X509,
    ca_root: &X509,
    cipher_list: &str,
) -> Result<SslAcceptor, ErrorStack> {
    let mut b = SslAcceptor::mozilla_intermediate_v5(SslMethod::tls_server())?;
    b.set_min_proto_version(Some(SslVersion::TLS1_2))?;
    b.set_max_proto_version(Some(SslVersion::TLS1_2))?;
    b.set_cipher_list(cipher_list)?;
    b.set_private_key(key)?;
    b.set_certificate(cert)?;
    b.check_private_key()?;
    b.cert_store_mut().add_cert(ca_root.clone())?;
    b.set_verify(SslVerifyMode::PEER | SslVerifyMode::FAIL_IF_NO_PEER_CERT);
    Ok(b.build())
}

/// A running controller listening for switches on loopback.
pub struct Controller {
    service: ServiceHandle,
    stats: Arc<ControllerStats>,
}

impl Controller {
    pub fn spawn(listener: TcpListener, acceptor: SslAcceptor) -> io::Result<Controller> {
        let stats = Arc::new(ControllerStats::default());
        let s = stats.clone();
        let acceptor = Arc::new(acceptor);
        let service = service::spawn_tcp(listener, "controller", move |stream: TcpStream, peer| {
            let _ = stream.set_read_timeout(Some(READ_TIMEOUT));
            let _ = stream.set_nodelay(true);
            let mut tls = match acceptor.accept(stream) {
                Ok(t) => t,
                Err(e) => {
                    log::debug!("controller: handshake with {peer} failed: {e}");
                    s.handshake_failures.fetch_add(1, Ordering::Relaxed);
                    return;
                }
            };
            s.sessions.fetch_add(1, Ordering::Relaxed);
            if let Err(e) = serve_session(&mut tls, &s) {
                log::debug!("controller: session with {peer} ended: {e}");
            }
            let _ = tls.shutdown();
        })?;
        Ok(Controller { service, stats })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.service.local_addr()
    }

    pub fn stats(&self) -> &ControllerStats {
        &self.stats
    }

    pub fn shutdown(self) {
        self.service.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Mac = [2, 0, 0, 0, 0, 0xa];
    const B: Mac = [2, 0, 0, 0, 0, 0xb];

    fn frame(dst: Mac, src: Mac) -> Vec<u8> {
        [&dst[..], &src[..], &[0x08, 0x00], &[0u8; 50][..]].concat()
    }

    #[test]
    fn learns_then_unicasts() {
        let mut t = MacTable::new();
        let out = controller_handle_packet_in(&PacketIn::new(1, 1, frame(B, A)), &mut t);
        assert!(out.is_flood());
        assert_eq!(t.lookup(&A), Some(1));
        let back = controller_handle_packet_in(&PacketIn::new(2, 2, frame(A, B)), &mut t);
        assert_eq!(back.out_port, 1);
        assert_eq!(back.data, frame(A, B));
        assert_eq!(t.lookup(&B), Some(2));
        let again = controller_handle_packet_in(&PacketIn::new(3, 1, frame(B, A)), &mut t);
        assert_eq!(again.out_port, 2);
    }

    #[test]
    fn relearns_moved_hosts_and_floods_broadcast() {
        let mut t = MacTable::new();
        t.learn(A, 1);
        t.learn(A, 3);
        assert_eq!(t.lookup(&A), Some(3));
        let out = controller_handle_packet_in(&PacketIn::new(1, 2, frame(BROADCAST, B)), &mut t);
        assert!(out.is_flood());
    }

    #[test]
    fn truncated_header_is_dropped() {
        let stats = ControllerStats::default();
        let mut c = LearningController::new();
        let msg = PacketIn::new(1, 1, frame(B, A)).encode().unwrap();
        assert!(c.handle_message(&msg[..17], &stats).is_none());
        assert_eq!(stats.malformed.load(Ordering::Relaxed), 1);
        assert!(c.handle_message(&msg, &stats).is_some());
        assert_eq!(stats.packet_ins.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn session_over_plain_stream() {
        struct Pipe {
            input: io::Cursor<Vec<u8>>,
            output: Vec<u8>,
        }
        impl Read for Pipe {
            fn read(&mut self, b: &mut [u8]) -> io::Result<usize> {
                self.input.read(b)
            }
        }
        impl Write for Pipe {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.output.extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let input = [
            PacketIn::new(1, 1, frame(B, A)).encode().unwrap(),
            PacketIn::new(2, 2, frame(A, B)).encode().unwrap(),
        ]
        .concat();
        let mut pipe = Pipe {
            input: io::Cursor::new(input),
            output: Vec::new(),
        };
        let stats = ControllerStats::default();
        serve_session(&mut pipe, &stats).unwrap();
        let first = openflow::take_message(&mut pipe.output).unwrap().unwrap();
        let second = openflow::take_message(&mut pipe.output).unwrap().unwrap();
        assert!(PacketOut::decode(&first).unwrap().is_flood());
        assert_eq!(PacketOut::decode(&second).unwrap().out_port, 1);
        assert_eq!(stats.sent_of_type(openflow::OFPT_PACKET_OUT), 2);
        assert_eq!(stats.flow_mods_sent(), 0);
    }
}
