use std::fmt;

use thiserror::Error;

/// TLS 1.2 suites the compartment knows how to name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CipherSuite {
    EcdheRsaAes256Sha,
    EcdheRsaAes128Sha,
    EcdheRsaAes256GcmSha384,
    EcdheRsaAes128GcmSha256,
    EcdheRsaChacha20Poly1305,
    RsaAes256Sha,
    RsaAes128Sha,
    RsaAes256GcmSha384,
}

impl CipherSuite {
    pub const ALL: [CipherSuite; 8] = [
        CipherSuite::EcdheRsaAes256Sha,
        CipherSuite::EcdheRsaAes128Sha,
        CipherSuite::EcdheRsaAes256GcmSha384,
        CipherSuite::EcdheRsaAes128GcmSha256,
        CipherSuite::EcdheRsaChacha20Poly1305,
        CipherSuite::RsaAes256Sha,
        CipherSuite::RsaAes128Sha,
        CipherSuite::RsaAes256GcmSha384,
    ];

    pub fn openssl_name(self) -> &'static str {
        match self {
            CipherSuite::EcdheRsaAes256Sha => "ECDHE-RSA-AES256-SHA",
            CipherSuite::EcdheRsaAes128Sha => "ECDHE-RSA-AES128-SHA",
            CipherSuite::EcdheRsaAes256GcmSha384 => "ECDHE-RSA-AES256-GCM-SHA384",
            CipherSuite::EcdheRsaAes128GcmSha256 => "ECDHE-RSA-AES128-GCM-SHA256",
            CipherSuite::EcdheRsaChacha20Poly1305 => "ECDHE-RSA-CHACHA20-POLY1305",
            CipherSuite::RsaAes256Sha => "AES256-SHA",
            CipherSuite::RsaAes128Sha => "AES128-SHA",
            CipherSuite::RsaAes256GcmSha384 => "AES256-GCM-SHA384",
        }
    }

    pub fn from_openssl_name(name: &str) -> Option<CipherSuite> {
        CipherSuite::ALL.into_iter().find(|s| s.openssl_name() == name)
    }

    pub fn is_ecdhe(self) -> bool {
        self.openssl_name().starts_with("ECDHE-")
    }

    pub fn is_aead(self) -> bool {
        let n = self.openssl_name();
        n.contains("GCM") || n.contains("POLY1305")
    }
}

impl fmt::Display for CipherSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.openssl_name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cipher policy permits no suite")]
pub struct EmptyPolicy;

/// Which suites the compartment will negotiate. The flags are enforced on
/// construction: a suite violating them never appears in `allowed_suites`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherPolicy {
    require_ecdhe: bool,
    require_aead: bool,
    allowed_suites: Vec<CipherSuite>,
}

impl CipherPolicy {
    /// `allowed` is in preference order; suites violating the flags are
    /// dropped.
    pub fn new(require_ecdhe: bool, require_aead: bool, allowed: &[CipherSuite]) -> Result<CipherPolicy, EmptyPolicy> {
        let mut allowed_suites: Vec<CipherSuite> = Vec::new();
        for &s in allowed {
            if (require_ecdhe && !s.is_ecdhe()) || (require_aead && !s.is_aead()) || allowed_suites.contains(&s) {
                continue;
            }
            allowed_suites.push(s);
        }
        if allowed_suites.is_empty() {
            return Err(EmptyPolicy);
        }
        Ok(CipherPolicy {
            require_ecdhe,
            require_aead,
            allowed_suites,
        })
    }

    /// Interoperable default. Prefers ECDHE-RSA-AES256-SHA, the suite a
    /// stock Open vSwitch/OpenSSL pair negotiates.
    pub fn compatible() -> CipherPolicy {
        CipherPolicy::new(
            false,
            false,
            &[
                CipherSuite::EcdheRsaAes256Sha,
                CipherSuite::EcdheRsaAes256GcmSha384,
                CipherSuite::EcdheRsaAes128GcmSha256,
            ],
        )
        .expect("non-empty")
    }

    /// Forward-secret key exchange with AEAD bulk encryption only.
    pub fn hardened() -> CipherPolicy {
        CipherPolicy::new(true, true, &CipherSuite::ALL).expect("non-empty")
    }

    pub fn require_ecdhe(&self) -> bool {
        self.require_ecdhe
    }

    pub fn require_aead(&self) -> bool {
        self.require_aead
    }

    pub fn allowed_suites(&self) -> &[CipherSuite] {
        &self.allowed_suites
    }

    pub fn permits(&self, suite: CipherSuite) -> bool {
        self.allowed_suites.contains(&suite)
    }

    /// OpenSSL cipher-list string in preference order.
    pub fn cipher_list(&self) -> String {
        self.allowed_suites
            .iter()
            .map(|s| s.openssl_name())
            .collect::<Vec<_>>()
            .join(":")
    }
}

impl Default for CipherPolicy {
    fn default() -> Self {
        CipherPolicy::compatible()
    }
}
