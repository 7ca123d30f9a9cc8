//! Trust anchors for software-defined networks.
//!
//! Network elements (virtual switches and VNFs) are admitted into an SDN
//! deployment only after a certificate authority has verified a quote from
//! the host's root of trust together with its measurement list. The
//! resulting credentials live inside an isolated TLS compartment that only
//! exposes a narrow, ECALL-shaped operation surface.
//!
//! Module map:
//!
//! - [`measurement_log`]: IMA-style append-only measurement list anchored in a PCR bank.
//! - [`root_of_trust`]: TPM analog producing signed quotes over selected PCRs.
//! - [`platform`]: a simulated host combining the two.
//! - [`attestation_agent`]: local-only service proxying quote requests.
//! - [`extended_ca`]: certificate authority that signs CSRs only for attested hosts.
//! - [`enclave_tls`]: the credential compartment and its TLS session surface.
//! - [`enrollment`]: the client-side enrollment state machine.
//! - [`sdn_harness`]: learning controller, virtual switch and latency benchmark.

pub mod attestation_agent;
pub mod digest;
pub mod enclave_tls;
pub mod enrollment;
pub mod extended_ca;
pub mod measurement_log;
pub mod pki;
pub mod platform;
pub mod rng;
pub mod root_of_trust;
pub mod sdn_harness;
pub mod service;
pub mod wire;

pub use digest::Digest;
