//! Process exit codes. The values are part of the interface.

use trustplane::enrollment::FailureReason;
use trustplane::extended_ca::RejectionReason;

pub const OK: u8 = 0;
pub const BIND: u8 = 1;
pub const CONFIG: u8 = 2;
pub const BENCH: u8 = 3;
pub const CA_UNREACHABLE: u8 = 20;
pub const AGENT_UNREACHABLE: u8 = 21;
pub const AGENT_PROTOCOL: u8 = 22;
pub const CA_PROTOCOL: u8 = 23;
pub const COMPARTMENT: u8 = 24;

/// CA checks map to 10..=15 in check order; an undecodable request is 16.
pub fn for_rejection(r: RejectionReason) -> u8 {
    match r {
        RejectionReason::QuoteSig => 10,
        RejectionReason::Nonce => 11,
        RejectionReason::PcrMismatch => 12,
        RejectionReason::UnknownMeasurement => 13,
        RejectionReason::MissingRequired => 14,
        RejectionReason::BadCsr => 15,
        RejectionReason::Malformed => 16,
    }
}

pub fn for_failure(f: &FailureReason) -> u8 {
    match f {
        FailureReason::Rejected(r) => for_rejection(*r),
        FailureReason::CaUnreachable(_) => CA_UNREACHABLE,
        FailureReason::AgentUnreachable(_) => AGENT_UNREACHABLE,
        FailureReason::AgentProtocol(_) | FailureReason::AgentRefused => AGENT_PROTOCOL,
        FailureReason::CaProtocol => CA_PROTOCOL,
        FailureReason::CertificateInvalid(_) | FailureReason::Compartment(_) => COMPARTMENT,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn codes_are_distinct() {
        let mut seen = HashSet::new();
        for r in RejectionReason::CHECKS.into_iter().chain([RejectionReason::Malformed]) {
            assert!(seen.insert(for_rejection(r)));
        }
        for c in [OK, BIND, CONFIG, BENCH, CA_UNREACHABLE, AGENT_UNREACHABLE, AGENT_PROTOCOL, CA_PROTOCOL, COMPARTMENT] {
            assert!(seen.insert(c), "{c} reused");
        }
    }
}
