//! A simulated host: one root of trust plus the IMA-style log it anchors.

use std::sync::RwLock;

use crate::measurement_log::{self, MeasurementError, MeasurementList, PcrBank, PcrIndex};
use crate::root_of_trust::{generate_quote, AttestationIdentity, AttestationKey, Nonce, Quote, QuoteError};
use crate::Digest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasuredFile {
    pub path: String,
    pub content: Vec<u8>,
}

/// The set of files a host measures at boot, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HostManifest {
    pub files: Vec<MeasuredFile>,
}

impl HostManifest {
    /// Synthetic TCB of a host running a virtual switch and one VNF.
    pub fn reference() -> HostManifest {
        let paths = [
            "/boot/vmlinuz",
            "/usr/lib/libc.so.6",
            "/usr/sbin/ovs-vswitchd",
            "/usr/lib/libenclave-tls.so",
            "/etc/openvswitch/conf.db",
            "/usr/bin/vnf-app",
        ];
        HostManifest {
            files: paths
                .iter()
                .map(|p| MeasuredFile {
                    path: p.to_string(),
                    content: format!("reference build of {p}").into_bytes(),
                })
                .collect(),
        }
    }

    pub fn push(&mut self, path: &str, content: &[u8]) {
        self.files.push(MeasuredFile {
            path: path.to_string(),
            content: content.to_vec(),
        });
    }

    /// Copy with one byte of `path`'s content flipped. Returns `None` if the
    /// path is not in the manifest.
    pub fn with_tampered(&self, path: &str) -> Option<HostManifest> {
        let mut out = self.clone();
        let file = out.files.iter_mut().find(|f| f.path == path)?;
        match file.content.first_mut() {
            Some(b) => *b ^= 0x01,
            None => file.content.push(0x01),
        }
        Some(out)
    }

    pub fn without(&self, path: &str) -> HostManifest {
        HostManifest {
            files: self.files.iter().filter(|f| f.path != path).cloned().collect(),
        }
    }

    pub fn boot(&self, identity: AttestationIdentity, pcr: PcrIndex) -> Result<HostPlatform, MeasurementError> {
        let host = HostPlatform::new(identity, pcr);
        for f in &self.files {
            host.measure(&f.path, &f.content)?;
        }
        Ok(host)
    }
}

pub struct HostPlatform {
    identity: AttestationIdentity,
    measurement_pcr: PcrIndex,
    state: RwLock<(PcrBank, MeasurementList)>,
}

impl HostPlatform {
    pub fn new(identity: AttestationIdentity, measurement_pcr: PcrIndex) -> HostPlatform {
        HostPlatform {
            identity,
            measurement_pcr,
            state: RwLock::new((PcrBank::new(), MeasurementList::new())),
        }
    }

    pub fn attestation_key(&self) -> &AttestationKey {
        self.identity.public_key()
    }

    pub fn measurement_pcr(&self) -> PcrIndex {
        self.measurement_pcr
    }

    /// Measures a file into the host's measurement PCR.
    pub fn measure(&self, path: &str, content: &[u8]) -> Result<Digest, MeasurementError> {
        let mut guard = self.state.write().expect("platform lock poisoned");
        let (bank, list) = &mut *guard;
        measurement_log::measure(list, bank, self.measurement_pcr.get(), path, content)
    }

    pub fn snapshot(&self) -> (PcrBank, MeasurementList) {
        self.state.read().expect("platform lock poisoned").clone()
    }

    /// Quote and measurement list taken from the same snapshot.
    pub fn attest(&self, nonce: &Nonce, selection: &[usize]) -> Result<(Quote, MeasurementList), QuoteError> {
        let (bank, list) = self.snapshot();
        let quote = generate_quote(&self.identity, &bank, nonce, selection)?;
        Ok((quote, list))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement_log::DEFAULT_MEASUREMENT_PCR;
    use crate::rng::seeded;
    use crate::root_of_trust::{pcr_composite, verify_quote};

    #[test]
    fn attest_pairs_are_consistent() {
        let host = HostManifest::reference()
            .boot(AttestationIdentity::generate(&mut seeded("t", "host")), DEFAULT_MEASUREMENT_PCR)
            .unwrap();
        let (quote, list) = host.attest(&[3; 32], &[10]).unwrap();
        assert!(verify_quote(&quote, &[3; 32], host.attestation_key()));
        assert_eq!(quote.composite, pcr_composite([&list.replay()]));
        assert_eq!(list.len(), HostManifest::reference().files.len());
    }

    #[test]
    fn later_measurements_show_up_in_next_snapshot() {
        let host = HostPlatform::new(AttestationIdentity::generate(&mut seeded("t", "h")), DEFAULT_MEASUREMENT_PCR);
        assert!(host.snapshot().1.is_empty());
        host.measure("/tmp/late", b"x").unwrap();
        assert_eq!(host.snapshot().1.len(), 1);
    }

    #[test]
    fn tampering_flips_one_byte() {
        let m = HostManifest::reference();
        let t = m.with_tampered("/usr/sbin/ovs-vswitchd").unwrap();
        let (a, b) = (&m.files[2].content, &t.files[2].content);
        assert_eq!(a.len(), b.len());
        assert_eq!(a.iter().zip(b).filter(|(x, y)| x != y).count(), 1);
        assert!(m.with_tampered("/nope").is_none());
    }
}
