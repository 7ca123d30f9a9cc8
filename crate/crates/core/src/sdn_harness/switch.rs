//! Virtual switch whose southbound channel runs through the compartment.

use std::collections::BTreeMap;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::openflow::{self, Header, PacketIn, PacketOut, OFPP_FLOOD, OFPT_FLOW_MOD, OFPT_PACKET_OUT};
use super::packet::{fragment, MTU};
use crate::enclave_tls::{Compartment, EcallKind, EnclaveError, SslError, SslState, TlsContextHandle};

pub const REPLY_TIMEOUT: Duration = Duration::from_secs(5);
const READ_CHUNK: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("southbound session is {0:?}")]
    SessionDown(SslState),
    #[error("southbound ssl error {0:?}")]
    Ssl(SslError),
    #[error("no reply from controller within {0:?}")]
    Timeout(Duration),
    #[error("compartment: {0}")]
    Compartment(#[from] EnclaveError),
    #[error("openflow: {0}")]
    OpenFlow(#[from] openflow::OpenFlowError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardOutcome {
    pub packet_ins: usize,
    /// Output port chosen for each Packet-In, in order.
    pub actions: Vec<u16>,
    /// Ports that received a frame.
    pub delivered: Vec<u16>,
}

impl ForwardOutcome {
    pub fn flooded(&self) -> bool {
        self.actions.contains(&OFPP_FLOOD)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchCounters {
    pub forwarded: u64,
    pub dropped: u64,
    pub packet_ins: u64,
    pub floods: u64,
    pub unicasts: u64,
    pub flow_mods_received: u64,
    pub other_messages: u64,
}

/// ECALL time accumulated over a number of forwarded frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EcallTotals {
    pub frames: u64,
    pub calls: BTreeMap<EcallKind, u64>,
    pub time: BTreeMap<EcallKind, Duration>,
}

impl EcallTotals {
    pub fn mean_call(&self, kind: EcallKind) -> Option<Duration> {
        let n = *self.calls.get(&kind)?;
        (n > 0).then(|| self.time[&kind] / n as u32)
    }

    pub fn total_time(&self) -> Duration {
        self.time.values().sum()
    }
}

pub struct VirtualSwitch {
    compartment: Arc<Compartment>,
    handle: TlsContextHandle,
    ports: BTreeMap<u16, Sender<Vec<u8>>>,
    rx: Vec<u8>,
    next_xid: u32,
    mtu: usize,
    counters: SwitchCounters,
    ecalls: EcallTotals,
}

impl VirtualSwitch {
    pub fn new(compartment: Arc<Compartment>, handle: TlsContextHandle) -> VirtualSwitch {
        VirtualSwitch {
            compartment,
            handle,
            ports: BTreeMap::new(),
            rx: Vec::new(),
            next_xid: 1,
            mtu: MTU,
            counters: SwitchCounters::default(),
            ecalls: EcallTotals::default(),
        }
    }

    pub fn attach_port(&mut self, number: u16, egress: Sender<Vec<u8>>) {
        self.ports.insert(number, egress);
    }

    pub fn counters(&self) -> &SwitchCounters {
        &self.counters
    }

    /// Returns and resets the ECALL totals.
    pub fn take_ecall_totals(&mut self) -> EcallTotals {
        std::mem::take(&mut self.ecalls)
    }

    pub fn handle(&self) -> TlsContextHandle {
        self.handle
    }

    /// Sends `frame` to the controller and applies the returned actions.
    /// Frames over the MTU travel as one Packet-In per fragment.
    pub fn switch_forward(&mut self, frame: &[u8], in_port: u16) -> Result<ForwardOutcome, ForwardError> {
        let result = self.forward_inner(frame, in_port);
        match &result {
            Ok(_) => self.counters.forwarded += 1,
            Err(e) => {
                log::debug!("switch: dropping frame: {e}");
                self.counters.dropped += 1;
            }
        }
        self.collect_trace();
        result
    }

    fn forward_inner(&mut self, frame: &[u8], in_port: u16) -> Result<ForwardOutcome, ForwardError> {
        let mut outcome = ForwardOutcome {
            packet_ins: 0,
            actions: Vec::new(),
            delivered: Vec::new(),
        };
        for piece in fragment(frame, self.mtu) {
            let xid = self.next_xid;
            self.next_xid = self.next_xid.wrapping_add(1);
            let msg = PacketIn::new(xid, in_port, piece).encode()?;
            self.send(&msg)?;
            self.counters.packet_ins += 1;
            outcome.packet_ins += 1;
            let reply = self.await_packet_out(xid)?;
            outcome.actions.push(reply.out_port);
            if reply.is_flood() {
                self.counters.floods += 1;
                for (&port, tx) in &self.ports {
                    if port != in_port && tx.send(reply.data.clone()).is_ok() {
                        outcome.delivered.push(port);
                    }
                }
            } else {
                self.counters.unicasts += 1;
                if let Some(tx) = self.ports.get(&reply.out_port) {
                    if tx.send(reply.data).is_ok() {
                        outcome.delivered.push(reply.out_port);
                    }
                }
            }
        }
        Ok(outcome)
    }

    fn send(&mut self, msg: &[u8]) -> Result<(), ForwardError> {
        let c = &self.compartment;
        let state = c.ssl_get_state(self.handle)?;
        if state != SslState::Established {
            return Err(ForwardError::SessionDown(state));
        }
        let deadline = Instant::now() + REPLY_TIMEOUT;
        let mut written = 0;
        while written < msg.len() {
            let n = c.ssl_write(self.handle, &msg[written..])?;
            if n > 0 {
                written += n as usize;
                continue;
            }
            match c.ssl_get_error(self.handle, n)? {
                SslError::WantRead | SslError::WantWrite if Instant::now() < deadline => thread::yield_now(),
                SslError::WantRead | SslError::WantWrite => return Err(ForwardError::Timeout(REPLY_TIMEOUT)),
                e => return Err(ForwardError::Ssl(e)),
            }
        }
        let state = c.ssl_get_state(self.handle)?;
        if state != SslState::Established {
            return Err(ForwardError::SessionDown(state));
        }
        Ok(())
    }

    fn await_packet_out(&mut self, xid: u32) -> Result<PacketOut, ForwardError> {
        let deadline = Instant::now() + REPLY_TIMEOUT;
        loop {
            while let Some(raw) = openflow::take_message(&mut self.rx)? {
                match Header::parse(&raw)?.msg_type {
                    OFPT_PACKET_OUT => {
                        let po = PacketOut::decode(&raw)?;
                        if po.xid == xid {
                            return Ok(po);
                        }
                        self.counters.other_messages += 1;
                    }
                    OFPT_FLOW_MOD => self.counters.flow_mods_received += 1,
                    _ => self.counters.other_messages += 1,
                }
            }
            let c = &self.compartment;
            let before = c.ssl_get_state(self.handle)?;
            let (n, data) = c.ssl_read(self.handle, READ_CHUNK)?;
            let after = c.ssl_get_state(self.handle)?;
            if n > 0 {
                self.rx.extend_from_slice(&data);
                continue;
            }
            if before != after || after != SslState::Established {
                return Err(ForwardError::SessionDown(after));
            }
            match c.ssl_get_error(self.handle, n)? {
                SslError::WantRead if Instant::now() < deadline => thread::yield_now(),
                SslError::WantRead => return Err(ForwardError::Timeout(REPLY_TIMEOUT)),
                e => return Err(ForwardError::Ssl(e)),
            }
        }
    }

    fn collect_trace(&mut self) {
        let Ok(records) = self.compartment.boundary_trace(self.handle) else {
            return;
        };
        if records.is_empty() {
            return;
        }
        self.ecalls.frames += 1;
        for r in records {
            *self.ecalls.calls.entry(r.kind).or_default() += 1;
            *self.ecalls.time.entry(r.kind).or_default() += r.duration;
        }
    }
}

/// Messages accepted by a running switch actor.
#[derive(Debug)]
pub enum SwitchCommand {
    Frame { in_port: u16, frame: Vec<u8> },
    TakeEcallTotals(Sender<EcallTotals>),
    Counters(Sender<SwitchCounters>),
}

/// Runs the switch as an actor until every command sender is dropped, then
/// returns it.
pub fn spawn_switch(mut switch: VirtualSwitch, commands: Receiver<SwitchCommand>) -> JoinHandle<VirtualSwitch> {
    thread::Builder::new()
        .name("vswitch".into())
        .spawn(move || {
            loop {
                match commands.recv_timeout(Duration::from_millis(50)) {
                    Ok(SwitchCommand::Frame { in_port, frame }) => {
                        let _ = switch.switch_forward(&frame, in_port);
                    }
                    Ok(SwitchCommand::TakeEcallTotals(reply)) => {
                        let _ = reply.send(switch.take_ecall_totals());
                    }
                    Ok(SwitchCommand::Counters(reply)) => {
                        let _ = reply.send(switch.counters().clone());
                    }
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            switch
        })
        .expect("spawn switch thread")
}
