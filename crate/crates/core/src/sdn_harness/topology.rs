//! In-process deployments: CA and host agent, plus a datapath of controller,
//! switch and two hosts.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use openssl::x509::X509;
use thiserror::Error;

use super::controller::{controller_acceptor, Controller, ControllerStats};
use super::packet::Endpoint;
use super::switch::{spawn_switch, EcallTotals, SwitchCommand, SwitchCounters, VirtualSwitch};
use super::traffic::{run_echo_server, run_traffic_generator, EchoStats, GeneratorConfig, GeneratorReport, SimPort};
use crate::attestation_agent::{AgentConfig, AttestationAgent, LocalEndpoint};
use crate::enclave_tls::{
    BoundaryCapture, CapturedTransport, CipherPolicy, Compartment, CompartmentConfig, EnclaveError, InitReport,
    SslState,
};
use crate::enrollment::EnrollmentOptions;
use crate::extended_ca::{request_controller_certificate, CaConfig, ExtendedCa, KnownGoodConfig};
use crate::measurement_log::DEFAULT_MEASUREMENT_PCR;
use crate::pki;
use crate::platform::{HostManifest, HostPlatform};
use crate::rng::{self, Rng};
use crate::root_of_trust::AttestationIdentity;
use crate::service::ServiceHandle;

pub const GENERATOR_PORT: u16 = 1;
pub const ECHO_PORT: u16 = 2;

pub const GENERATOR_HOST: Endpoint = Endpoint {
    mac: [0x02, 0, 0, 0, 0, 0x01],
    ip: [10, 0, 0, 1],
    port: 40_000,
};

pub const ECHO_HOST: Endpoint = Endpoint {
    mac: [0x02, 0, 0, 0, 0, 0x02],
    ip: [10, 0, 0, 2],
    port: 7,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ca: {0}")]
    Ca(#[from] crate::extended_ca::CaError),
    #[error("agent: {0}")]
    Agent(#[from] crate::attestation_agent::AgentError),
    #[error("compartment: {0}")]
    Compartment(#[from] EnclaveError),
    #[error("controller certificate: {0}")]
    ControllerCertificate(String),
    #[error("measurement: {0}")]
    Measurement(#[from] crate::measurement_log::MeasurementError),
    #[error("openssl: {0}")]
    OpenSsl(#[from] openssl::error::ErrorStack),
    #[error("southbound handshake ended in {0:?}")]
    Handshake(SslState),
    #[error("topology down: {0}")]
    TopologyDown(String),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct DeploymentConfig {
    /// Fixes every random stream. Falls back to `TRUSTPLANE_SEED`.
    pub seed: Option<String>,
    /// Software the CA considers trustworthy.
    pub reference: HostManifest,
    /// Software the host actually boots.
    pub host_manifest: HostManifest,
    pub pcr_selection: Vec<usize>,
    pub ca_config: CaConfig,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        DeploymentConfig {
            seed: None,
            reference: HostManifest::reference(),
            host_manifest: HostManifest::reference(),
            pcr_selection: vec![DEFAULT_MEASUREMENT_PCR.get()],
            ca_config: CaConfig::default(),
        }
    }
}

impl DeploymentConfig {
    pub fn rng(&self, label: &str) -> Rng {
        match &self.seed {
            Some(s) => rng::seeded(s, label),
            None => rng::for_component(label),
        }
    }
}

/// Extended CA plus one attested host with its local agent, all on
/// loopback.
pub struct Deployment {
    ca: Arc<ExtendedCa>,
    host: Arc<HostPlatform>,
    agent_endpoint: LocalEndpoint,
    ca_service: ServiceHandle,
    admin_service: ServiceHandle,
    _agent_service: ServiceHandle,
}

impl Deployment {
    pub fn start(config: &DeploymentConfig) -> Result<Deployment, HarnessError> {
        let identity = AttestationIdentity::generate(&mut config.rng("host-attestation-key"));
        let host = Arc::new(config.host_manifest.boot(identity, config.ca_config.measurement_pcr)?);
        let mut known_good = KnownGoodConfig::from_manifest(&config.reference);
        known_good.trust_key(host.attestation_key().clone());
        let root_seed = rng::random_bytes(&mut config.rng("ca-root"));
        let ca = Arc::new(ExtendedCa::new(
            Some(root_seed),
            known_good,
            config.ca_config.clone(),
            config.rng("ca"),
        )?);
        Deployment::with_ca(ca, host, &config.pcr_selection)
    }

    /// Uses an existing CA and host.
    pub fn with_ca(ca: Arc<ExtendedCa>, host: Arc<HostPlatform>, selection: &[usize]) -> Result<Deployment, HarnessError> {
        let loopback: SocketAddr = "127.0.0.1:0".parse().expect("literal");
        let ca_service = ca.clone().serve(loopback)?;
        let admin_service = ca.clone().serve_admin(loopback)?;
        let listener = TcpListener::bind(loopback)?;
        let bound = listener.local_addr()?;
        drop(listener);
        let endpoint = LocalEndpoint::loopback(bound)?;
        let agent = Arc::new(AttestationAgent::new(
            AgentConfig::new("host-0", endpoint.clone(), selection.to_vec())?,
            host.clone(),
        ));
        let agent_service = agent.serve()?;
        Ok(Deployment {
            ca,
            host,
            agent_endpoint: endpoint,
            ca_service,
            admin_service,
            _agent_service: agent_service,
        })
    }

    pub fn ca(&self) -> &Arc<ExtendedCa> {
        &self.ca
    }

    pub fn host(&self) -> &Arc<HostPlatform> {
        &self.host
    }

    pub fn ca_addr(&self) -> SocketAddr {
        self.ca_service.local_addr()
    }

    pub fn admin_addr(&self) -> SocketAddr {
        self.admin_service.local_addr()
    }

    pub fn agent_endpoint(&self) -> &LocalEndpoint {
        &self.agent_endpoint
    }

    pub fn root_certificate(&self) -> X509 {
        self.ca.root_certificate().clone()
    }

    pub fn new_compartment(&self, common_name: &str, trace_ecalls: bool) -> Compartment {
        Compartment::new(
            self.root_certificate(),
            CompartmentConfig::new(common_name).with_tracing(trace_ecalls),
        )
    }
}

/// Key and CA-issued certificate for a controller, obtained over the CA's
/// admin endpoint.
pub fn controller_credentials(
    deployment: &Deployment,
    name: &str,
) -> Result<(openssl::pkey::PKey<openssl::pkey::Private>, X509), HarnessError> {
    let key = pki::generate_rsa_key()?;
    let csr = pki::build_csr(&key, name)?;
    let der = request_controller_certificate(&deployment.admin_addr(), &csr)
        .map_err(|e| HarnessError::ControllerCertificate(e.to_string()))?
        .map_err(|r| HarnessError::ControllerCertificate(r.name().to_string()))?;
    Ok((key, X509::from_der(&der)?))
}

#[derive(Debug, Clone)]
pub struct DatapathConfig {
    pub policy: CipherPolicy,
    pub controller_ciphers: String,
    pub trace_ecalls: bool,
    /// Record every byte on the southbound transport.
    pub capture: Option<BoundaryCapture>,
    pub enrollment: EnrollmentOptions,
}

impl Default for DatapathConfig {
    fn default() -> Self {
        let policy = CipherPolicy::compatible();
        DatapathConfig {
            controller_ciphers: policy.cipher_list(),
            policy,
            trace_ecalls: false,
            capture: None,
            enrollment: EnrollmentOptions::default(),
        }
    }
}

/// Controller, enrolled switch and two hosts: generator on port 1, echo
/// server on port 2.
pub struct Datapath {
    compartment: Arc<Compartment>,
    init: InitReport,
    controller: Controller,
    commands: Option<Sender<SwitchCommand>>,
    switch: Option<JoinHandle<VirtualSwitch>>,
    generator: SimPort,
    echo_stop: Arc<AtomicBool>,
    echo: Option<JoinHandle<EchoStats>>,
}

impl Datapath {
    pub fn start(deployment: &Deployment, config: &DatapathConfig) -> Result<Datapath, HarnessError> {
        let compartment = Arc::new(deployment.new_compartment("ovs-vswitchd", config.trace_ecalls));
        let init = compartment.library_init_with(
            deployment.ca_addr(),
            deployment.agent_endpoint(),
            config.policy.clone(),
            &config.enrollment,
        )?;

        let (key, cert) = controller_credentials(deployment, "sdn-controller")?;
        let acceptor = controller_acceptor(&key, &cert, &deployment.root_certificate(), &config.controller_ciphers)?;
        let controller = Controller::spawn(TcpListener::bind("127.0.0.1:0")?, acceptor)?;

        let tcp = TcpStream::connect(controller.local_addr())?;
        tcp.set_nodelay(true)?;
        let handle = match &config.capture {
            Some(c) => compartment.ssl_new_and_connect(CapturedTransport::new(tcp, c.clone()))?,
            None => compartment.ssl_new_and_connect(tcp)?,
        };
        let state = compartment.ssl_get_state(handle)?;
        // The probe above is not part of any forwarded frame.
        compartment.boundary_trace(handle)?;
        if state != SslState::Established {
            return Err(HarnessError::Handshake(state));
        }

        let (tx, rx) = mpsc::channel();
        let mut switch = VirtualSwitch::new(compartment.clone(), handle);
        let (generator, egress1) = SimPort::new(GENERATOR_PORT, tx.clone());
        let (echo_port, egress2) = SimPort::new(ECHO_PORT, tx.clone());
        switch.attach_port(GENERATOR_PORT, egress1);
        switch.attach_port(ECHO_PORT, egress2);
        let switch = spawn_switch(switch, rx);
        let echo_stop = Arc::new(AtomicBool::new(false));
        let echo = run_echo_server(echo_port, echo_stop.clone());
        Ok(Datapath {
            compartment,
            init,
            controller,
            commands: Some(tx),
            switch: Some(switch),
            generator,
            echo_stop,
            echo: Some(echo),
        })
    }

    pub fn compartment(&self) -> &Arc<Compartment> {
        &self.compartment
    }

    pub fn init_report(&self) -> &InitReport {
        &self.init
    }

    pub fn controller_stats(&self) -> &ControllerStats {
        self.controller.stats()
    }

    /// Sends `count` frames of `size` bytes from the generator to the echo
    /// host and collects the round trips.
    pub fn run_traffic(&mut self, size: usize, rate_pps: u32, count: usize) -> Result<GeneratorReport, HarnessError> {
        let config = GeneratorConfig {
            src: GENERATOR_HOST,
            dst: ECHO_HOST,
            size,
            rate_pps,
            count,
            drain: Duration::from_secs(2),
        };
        run_traffic_generator(&mut self.generator, &config).map_err(|e| HarnessError::Config(e.to_string()))
    }

    fn ask<T>(&self, make: impl FnOnce(Sender<T>) -> SwitchCommand) -> Result<T, HarnessError> {
        let (tx, rx) = mpsc::channel();
        let down = || HarnessError::TopologyDown("switch stopped".into());
        self.commands.as_ref().ok_or_else(down)?.send(make(tx)).map_err(|_| down())?;
        rx.recv_timeout(Duration::from_secs(30)).map_err(|_| down())
    }

    pub fn switch_counters(&self) -> Result<SwitchCounters, HarnessError> {
        self.ask(SwitchCommand::Counters)
    }

    pub fn take_ecall_totals(&self) -> Result<EcallTotals, HarnessError> {
        self.ask(SwitchCommand::TakeEcallTotals)
    }

    /// Stops every actor and returns the final switch counters.
    pub fn shutdown(mut self) -> SwitchCounters {
        self.stop()
    }

    fn stop(&mut self) -> SwitchCounters {
        self.echo_stop.store(true, Ordering::Relaxed);
        if let Some(e) = self.echo.take() {
            let _ = e.join();
        }
        self.commands = None;
        // The generator port holds a command sender too; replace it with a
        // detached one so the switch sees every sender dropped.
        let (dead, _) = mpsc::channel();
        self.generator = SimPort::new(GENERATOR_PORT, dead).0;
        self.switch
            .take()
            .and_then(|s| s.join().ok())
            .map(|s| s.counters().clone())
            .unwrap_or_default()
    }
}

impl Drop for Datapath {
    fn drop(&mut self) {
        self.stop();
    }
}
