//! Desk-scale SDN deployment for exercising the compartment.
//!
//! Frames enter the [`switch::VirtualSwitch`] on simulated ports, cross
//! the compartment's TLS channel to the [`controller`] as Packet-Ins and
//! come back as Packet-Outs. The controller learns MAC addresses but never
//! installs flows, so every frame takes the controller path.

pub mod bench;
pub mod controller;
pub mod openflow;
pub mod packet;
pub mod stats;
pub mod switch;
pub mod topology;
pub mod traffic;

pub use bench::{run_enrollment_benchmark, run_latency_benchmark, LatencyReport};
pub use controller::{controller_handle_packet_in, Controller, MacTable};
pub use switch::{ForwardOutcome, VirtualSwitch};
pub use topology::{Datapath, DatapathConfig, Deployment, DeploymentConfig, HarnessError};
pub use traffic::{run_echo_server, run_traffic_generator, LatencySample};
