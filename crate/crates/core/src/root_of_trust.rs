//! Software TPM analog: an attestation identity that signs quotes binding a
//! caller nonce to a composite of selected PCR values.
//!
//! Quote wire encoding (big-endian):
//!
//! ```text
//! nonce(32) || count(2) || indices(1 each) || composite(32) || key_id(8) || sig_len(2) || signature
//! ```
//!
//! The signature field is `scheme(1) || raw signature` so a verifier can
//! tell which algorithm produced it. The signed message is
//! `nonce || count || indices || composite`.

use std::fmt;

use openssl::pkey::{Id, PKey, Private, Public};
use openssl::sign::{Signer, Verifier};
use rand::RngCore;
use thiserror::Error;

use crate::measurement_log::{MeasurementError, PcrBank, PcrIndex};
use crate::Digest;

pub const NONCE_LEN: usize = 32;
pub const KEY_ID_LEN: usize = 8;

pub type Nonce = [u8; NONCE_LEN];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuoteError {
    #[error("empty PCR selection")]
    EmptySelection,
    #[error("PCR {0} selected more than once")]
    DuplicateSelection(usize),
    #[error(transparent)]
    Pcr(#[from] MeasurementError),
    #[error("malformed quote encoding: {0}")]
    Malformed(&'static str),
    #[error("signing failed: {0}")]
    Signing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SignatureScheme {
    Ed25519 = 0x01,
}

impl SignatureScheme {
    fn from_byte(b: u8) -> Option<SignatureScheme> {
        match b {
            0x01 => Some(SignatureScheme::Ed25519),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; KEY_ID_LEN]);

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex::encode(self.0))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Public half of an attestation identity.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct AttestationKey {
    raw: [u8; 32],
}

impl fmt::Debug for AttestationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttestationKey({})", hex::encode(self.raw))
    }
}

impl AttestationKey {
    pub fn from_bytes(raw: &[u8]) -> Option<AttestationKey> {
        let raw: [u8; 32] = raw.try_into().ok()?;
        // Reject encodings OpenSSL will not load.
        PKey::public_key_from_raw_bytes(&raw, Id::ED25519).ok()?;
        Some(AttestationKey { raw })
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.raw
    }

    pub fn key_id(&self) -> KeyId {
        let d = Digest::of(&self.raw);
        let mut id = [0u8; KEY_ID_LEN];
        id.copy_from_slice(&d.0[..KEY_ID_LEN]);
        KeyId(id)
    }

    fn pkey(&self) -> Option<PKey<Public>> {
        PKey::public_key_from_raw_bytes(&self.raw, Id::ED25519).ok()
    }

    fn verify(&self, message: &[u8], signature_field: &[u8]) -> bool {
        let Some((&scheme, sig)) = signature_field.split_first() else {
            return false;
        };
        match SignatureScheme::from_byte(scheme) {
            Some(SignatureScheme::Ed25519) => {
                let Some(pkey) = self.pkey() else { return false };
                Verifier::new_without_digest(&pkey)
                    .and_then(|mut v| v.verify_oneshot(sig, message))
                    .unwrap_or(false)
            }
            None => false,
        }
    }
}

/// Signing identity of the root of trust. The private key never leaves
/// this type.
pub struct AttestationIdentity {
    private_key: PKey<Private>,
    public_key: AttestationKey,
}

impl fmt::Debug for AttestationIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationIdentity")
            .field("key_id", &self.key_id())
            .finish_non_exhaustive()
    }
}

impl AttestationIdentity {
    pub fn generate(rng: &mut impl RngCore) -> AttestationIdentity {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let private_key = PKey::private_key_from_raw_bytes(&seed, Id::ED25519)
            .expect("any 32-byte string is a valid Ed25519 seed");
        let raw = private_key
            .raw_public_key()
            .expect("Ed25519 keys expose raw public bytes");
        let public_key = AttestationKey::from_bytes(&raw).expect("32-byte public key");
        AttestationIdentity {
            private_key,
            public_key,
        }
    }

    pub fn public_key(&self) -> &AttestationKey {
        &self.public_key
    }

    pub fn key_id(&self) -> KeyId {
        self.public_key.key_id()
    }

    fn sign(&self, message: &[u8]) -> Result<Vec<u8>, QuoteError> {
        let mut signer = Signer::new_without_digest(&self.private_key)
            .map_err(|e| QuoteError::Signing(e.to_string()))?;
        let sig = signer
            .sign_oneshot_to_vec(message)
            .map_err(|e| QuoteError::Signing(e.to_string()))?;
        let mut field = Vec::with_capacity(1 + sig.len());
        field.push(SignatureScheme::Ed25519 as u8);
        field.extend_from_slice(&sig);
        Ok(field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub nonce: Nonce,
    pub selection: Vec<PcrIndex>,
    pub composite: Digest,
    pub key_id: KeyId,
    pub signature: Vec<u8>,
}

/// `H(values[0] || values[1] || ...)` in selection order.
pub fn pcr_composite<'a>(values: impl IntoIterator<Item = &'a Digest>) -> Digest {
    let mut hasher = openssl::sha::Sha256::new();
    for v in values {
        hasher.update(v.as_bytes());
    }
    Digest(hasher.finish())
}

fn selection_encoding(selection: &[PcrIndex]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + selection.len());
    out.extend_from_slice(&(selection.len() as u16).to_be_bytes());
    out.extend(selection.iter().map(|i| i.get() as u8));
    out
}

fn signed_message(nonce: &Nonce, selection: &[PcrIndex], composite: &Digest) -> Vec<u8> {
    let mut msg = Vec::with_capacity(NONCE_LEN + 2 + selection.len() + 32);
    msg.extend_from_slice(nonce);
    msg.extend_from_slice(&selection_encoding(selection));
    msg.extend_from_slice(composite.as_bytes());
    msg
}

/// Parses and validates an index list: non-empty, in range, no repeats.
pub fn parse_selection(selection: &[usize]) -> Result<Vec<PcrIndex>, QuoteError> {
    if selection.is_empty() {
        return Err(QuoteError::EmptySelection);
    }
    let mut out: Vec<PcrIndex> = Vec::with_capacity(selection.len());
    for &i in selection {
        let idx = PcrIndex::new(i)?;
        if out.contains(&idx) {
            return Err(QuoteError::DuplicateSelection(i));
        }
        out.push(idx);
    }
    Ok(out)
}

pub fn generate_quote(
    identity: &AttestationIdentity,
    bank: &PcrBank,
    nonce: &Nonce,
    selection: &[usize],
) -> Result<Quote, QuoteError> {
    let selection = parse_selection(selection)?;
    let composite = pcr_composite(selection.iter().map(|i| &bank.registers()[i.get()]));
    let signature = identity.sign(&signed_message(nonce, &selection, &composite))?;
    Ok(Quote {
        nonce: *nonce,
        selection,
        composite,
        key_id: identity.key_id(),
        signature,
    })
}

/// True iff the signature verifies under `key` and the quote carries
/// `expected_nonce`.
pub fn verify_quote(quote: &Quote, expected_nonce: &Nonce, key: &AttestationKey) -> bool {
    if quote.nonce != *expected_nonce || quote.key_id != key.key_id() {
        return false;
    }
    key.verify(
        &signed_message(&quote.nonce, &quote.selection, &quote.composite),
        &quote.signature,
    )
}

impl Quote {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + 2 + self.selection.len() + 32 + 10 + self.signature.len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&selection_encoding(&self.selection));
        out.extend_from_slice(self.composite.as_bytes());
        out.extend_from_slice(&self.key_id.0);
        out.extend_from_slice(&(self.signature.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Quote, QuoteError> {
        let mut r = crate::wire::Reader::new(bytes);
        let short = |_| QuoteError::Malformed("truncated");
        let nonce: Nonce = r.array().map_err(short)?;
        let count = r.u16().map_err(short)? as usize;
        let indices = r.take(count).map_err(short)?;
        let indices: Vec<usize> = indices.iter().map(|&b| b as usize).collect();
        let selection = parse_selection(&indices).map_err(|_| QuoteError::Malformed("bad selection"))?;
        let composite = Digest(r.array().map_err(short)?);
        let key_id = KeyId(r.array().map_err(short)?);
        let sig_len = r.u16().map_err(short)? as usize;
        let signature = r.take(sig_len).map_err(short)?.to_vec();
        if !r.is_empty() {
            return Err(QuoteError::Malformed("trailing bytes"));
        }
        Ok(Quote {
            nonce,
            selection,
            composite,
            key_id,
            signature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn round_trip_on_fresh_bank() {
        let id = AttestationIdentity::generate(&mut seeded("t", "rot"));
        let nonce = [7u8; 32];
        let q = generate_quote(&id, &PcrBank::new(), &nonce, &[10]).unwrap();
        assert!(verify_quote(&q, &nonce, id.public_key()));
        assert_eq!(q.composite, Digest::of(&[0u8; 32]));
    }

    #[test]
    fn selection_order_changes_composite() {
        // Oracle values: H(ext1 || zeros) and H(zeros || ext1), from hashlib.
        let mut bank = PcrBank::new();
        bank.extend(10, &Digest::of(b"d1")).unwrap();
        let id = AttestationIdentity::generate(&mut seeded("t", "rot"));
        let a = generate_quote(&id, &bank, &[0; 32], &[10, 11]).unwrap();
        let b = generate_quote(&id, &bank, &[0; 32], &[11, 10]).unwrap();
        assert_eq!(
            a.composite.to_hex(),
            "af5f4c4d25e5b96f9656bc0604fc2752252f9443c563b71d9786564d4e0d8d42"
        );
        assert_eq!(
            b.composite.to_hex(),
            "0246b59fc0c841f65b282f7c34843a766eec87fccc725a14764523e08e9cf451"
        );
    }

    #[test]
    fn rejects_bad_selections() {
        let id = AttestationIdentity::generate(&mut seeded("t", "rot"));
        let bank = PcrBank::new();
        assert_eq!(
            generate_quote(&id, &bank, &[0; 32], &[]),
            Err(QuoteError::EmptySelection)
        );
        assert!(matches!(
            generate_quote(&id, &bank, &[0; 32], &[24]),
            Err(QuoteError::Pcr(_))
        ));
        assert_eq!(
            generate_quote(&id, &bank, &[0; 32], &[3, 3]),
            Err(QuoteError::DuplicateSelection(3))
        );
    }

    #[test]
    fn wrong_nonce_and_flipped_signature_fail() {
        let id = AttestationIdentity::generate(&mut seeded("t", "rot"));
        let nonce = [1u8; 32];
        let q = generate_quote(&id, &PcrBank::new(), &nonce, &[10]).unwrap();
        assert!(!verify_quote(&q, &[2u8; 32], id.public_key()));
        for i in 0..q.signature.len() {
            let mut bad = q.clone();
            bad.signature[i] ^= 0x01;
            assert!(!verify_quote(&bad, &nonce, id.public_key()), "byte {i}");
        }
        let mut truncated = q.clone();
        truncated.signature.clear();
        assert!(!verify_quote(&truncated, &nonce, id.public_key()));
    }

    #[test]
    fn encoding_layout() {
        let id = AttestationIdentity::generate(&mut seeded("t", "rot"));
        let q = generate_quote(&id, &PcrBank::new(), &[9; 32], &[10, 11]).unwrap();
        let bytes = q.encode();
        assert_eq!(&bytes[..32], &[9; 32]);
        assert_eq!(&bytes[32..34], &[0, 2]);
        assert_eq!(&bytes[34..36], &[10, 11]);
        assert_eq!(&bytes[36..68], q.composite.as_bytes());
        assert_eq!(&bytes[68..76], &q.key_id.0);
        assert_eq!(u16::from_be_bytes([bytes[76], bytes[77]]) as usize, 65);
        assert_eq!(bytes[78], SignatureScheme::Ed25519 as u8);
        assert_eq!(bytes.len(), 78 + 65);
        assert_eq!(Quote::decode(&bytes).unwrap(), q);
        assert!(Quote::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Quote::decode(&trailing).is_err());
    }

    proptest! {
        #[test]
        fn quotes_do_not_verify_under_other_identities(seed_a in any::<u64>(), seed_b in any::<u64>(), nonce in any::<[u8; 32]>()) {
            prop_assume!(seed_a != seed_b);
            let a = AttestationIdentity::generate(&mut seeded(&seed_a.to_string(), "rot"));
            let b = AttestationIdentity::generate(&mut seeded(&seed_b.to_string(), "rot"));
            let q = generate_quote(&a, &PcrBank::new(), &nonce, &[10]).unwrap();
            prop_assert!(verify_quote(&q, &nonce, a.public_key()));
            prop_assert!(!verify_quote(&q, &nonce, b.public_key()));
            // Spoofing the key id does not help either.
            let mut spoofed = q.clone();
            spoofed.key_id = b.key_id();
            prop_assert!(!verify_quote(&spoofed, &nonce, b.public_key()));
        }
    }
}
