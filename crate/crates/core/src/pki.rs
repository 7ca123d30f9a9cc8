//! X.509 and CSR plumbing on top of OpenSSL.

use std::time::{SystemTime, UNIX_EPOCH};

use openssl::asn1::Asn1Time;
use openssl::bn::{BigNum, BigNumContext};
use openssl::ec::{EcGroup, EcKey, EcPoint};
use openssl::error::ErrorStack;
use openssl::hash::MessageDigest;
use openssl::nid::Nid;
use openssl::pkey::{Id, PKey, PKeyRef, Private, Public};
use openssl::rsa::Rsa;
use openssl::stack::Stack;
use openssl::x509::extension::{
    AuthorityKeyIdentifier, BasicConstraints, ExtendedKeyUsage, KeyUsage, SubjectKeyIdentifier,
};
use openssl::x509::store::X509StoreBuilder;
use openssl::x509::{X509Name, X509Ref, X509Req, X509StoreContext, X509};
use rand::RngCore;
use thiserror::Error;

pub const RSA_BITS: u32 = 2048;
pub const MIN_RSA_BITS: u32 = 2048;

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("malformed CSR: {0}")]
    MalformedCsr(String),
    #[error("CSR signature does not verify")]
    CsrSignature,
    #[error("unsupported CSR key: {0}")]
    WeakKey(String),
    #[error("openssl: {0}")]
    OpenSsl(#[from] ErrorStack),
}

/// Where an issued certificate may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertUsage {
    Client,
    Server,
}

pub fn generate_rsa_key() -> Result<PKey<Private>, ErrorStack> {
    PKey::from_rsa(Rsa::generate(RSA_BITS)?)
}

fn name(common_name: &str) -> Result<X509Name, ErrorStack> {
    let mut b = X509Name::builder()?;
    b.append_entry_by_nid(Nid::ORGANIZATIONNAME, "trustplane")?;
    b.append_entry_by_nid(Nid::COMMONNAME, common_name)?;
    Ok(b.build())
}

/// DER-encoded CSR self-signed by `key`.
pub fn build_csr(key: &PKeyRef<Private>, common_name: &str) -> Result<Vec<u8>, ErrorStack> {
    let mut b = X509Req::builder()?;
    b.set_version(0)?;
    b.set_subject_name(&*name(common_name)?)?;
    b.set_pubkey(key)?;
    b.sign(key, MessageDigest::sha256())?;
    b.build().to_der()
}

/// Parses a DER CSR and checks proof of possession and key strength.
pub fn verify_csr(der: &[u8]) -> Result<(X509Req, PKey<Public>), PkiError> {
    let req = X509Req::from_der(der).map_err(|e| PkiError::MalformedCsr(e.to_string()))?;
    let key = req.public_key().map_err(|e| PkiError::MalformedCsr(e.to_string()))?;
    match key.id() {
        Id::RSA if key.bits() >= MIN_RSA_BITS => {}
        Id::EC if key.bits() >= 256 => {}
        other => return Err(PkiError::WeakKey(format!("{other:?}/{} bits", key.bits()))),
    }
    if !req.verify(&key).unwrap_or(false) {
        return Err(PkiError::CsrSignature);
    }
    Ok((req, key))
}

/// P-256 key whose scalar is derived from `seed`, so a CA root key can be
/// reproduced across restarts.
pub fn ec_key_from_seed(seed: &[u8; 32]) -> Result<PKey<Private>, ErrorStack> {
    let group = EcGroup::from_curve_name(Nid::X9_62_PRIME256V1)?;
    let mut ctx = BigNumContext::new()?;
    let mut order = BigNum::new()?;
    group.order(&mut order, &mut ctx)?;
    let mut material = *seed;
    loop {
        let candidate = BigNum::from_slice(&material)?;
        let mut scalar = BigNum::new()?;
        scalar.nnmod(&candidate, &order, &mut ctx)?;
        if scalar.num_bits() > 0 {
            let mut point = EcPoint::new(&group)?;
            point.mul_generator2(&group, &scalar, &mut ctx)?;
            let key = EcKey::from_private_components(&group, &scalar, &point)?;
            key.check_key()?;
            return PKey::from_ec_key(key);
        }
        material = openssl::sha::sha256(&material);
    }
}

pub fn random_serial(rng: &mut impl RngCore) -> Result<BigNum, ErrorStack> {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    bytes[0] &= 0x7f;
    bytes[0] |= 0x01;
    BigNum::from_slice(&bytes)
}

fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Self-signed CA certificate.
pub fn self_signed_root(
    key: &PKeyRef<Private>,
    common_name: &str,
    serial: &BigNum,
    validity_secs: i64,
) -> Result<X509, ErrorStack> {
    let now = unix_now();
    let subject = name(common_name)?;
    let mut b = X509::builder()?;
    b.set_version(2)?;
    b.set_serial_number(&*serial.to_asn1_integer()?)?;
    b.set_subject_name(&subject)?;
    b.set_issuer_name(&subject)?;
    b.set_pubkey(key)?;
    b.set_not_before(&*Asn1Time::from_unix(now - 3600)?)?;
    b.set_not_after(&*Asn1Time::from_unix(now + validity_secs)?)?;
    b.append_extension(BasicConstraints::new().critical().ca().build()?)?;
    b.append_extension(KeyUsage::new().critical().key_cert_sign().crl_sign().build()?)?;
    let ski = SubjectKeyIdentifier::new().build(&b.x509v3_context(None, None))?;
    b.append_extension(ski)?;
    b.sign(key, MessageDigest::sha256())?;
    Ok(b.build())
}

/// Leaf certificate for `subject_key`, signed by the issuer.
#[allow(clippy::too_many_arguments)]
pub fn issue_leaf(
    issuer_key: &PKeyRef<Private>,
    issuer_cert: &X509Ref,
    subject: &openssl::x509::X509NameRef,
    subject_key: &PKeyRef<Public>,
    serial: &BigNum,
    validity_secs: i64,
    usage: &[CertUsage],
) -> Result<X509, ErrorStack> {
    let now = unix_now();
    let mut b = X509::builder()?;
    b.set_version(2)?;
    b.set_serial_number(&*serial.to_asn1_integer()?)?;
    b.set_subject_name(subject)?;
    b.set_issuer_name(issuer_cert.subject_name())?;
    b.set_pubkey(subject_key)?;
    b.set_not_before(&*Asn1Time::from_unix(now - 60)?)?;
    b.set_not_after(&*Asn1Time::from_unix(now + validity_secs)?)?;
    b.append_extension(BasicConstraints::new().critical().build()?)?;
    b.append_extension(
        KeyUsage::new()
            .critical()
            .digital_signature()
            .key_encipherment()
            .build()?,
    )?;
    let mut eku = ExtendedKeyUsage::new();
    for u in usage {
        match u {
            CertUsage::Client => eku.client_auth(),
            CertUsage::Server => eku.server_auth(),
        };
    }
    b.append_extension(eku.build()?)?;
    let ski = SubjectKeyIdentifier::new().build(&b.x509v3_context(Some(issuer_cert), None))?;
    b.append_extension(ski)?;
    let aki = AuthorityKeyIdentifier::new()
        .keyid(false)
        .build(&b.x509v3_context(Some(issuer_cert), None))?;
    b.append_extension(aki)?;
    b.sign(issuer_key, MessageDigest::sha256())?;
    Ok(b.build())
}

/// Self-signed end-entity credential, used for peers that never enrolled.
pub fn self_signed_leaf(key: &PKeyRef<Private>, common_name: &str) -> Result<X509, ErrorStack> {
    let public = PKey::public_key_from_der(&key.public_key_to_der()?)?;
    let subject = name(common_name)?;
    let mut b = X509::builder()?;
    b.set_version(2)?;
    b.set_serial_number(&*BigNum::from_u32(1)?.to_asn1_integer()?)?;
    b.set_subject_name(&subject)?;
    b.set_issuer_name(&subject)?;
    b.set_pubkey(&public)?;
    let now = unix_now();
    b.set_not_before(&*Asn1Time::from_unix(now - 60)?)?;
    b.set_not_after(&*Asn1Time::from_unix(now + 86_400)?)?;
    b.sign(key, MessageDigest::sha256())?;
    Ok(b.build())
}

/// True iff `cert` verifies against the single trust anchor `root`.
pub fn chains_to(cert: &X509Ref, root: &X509Ref) -> bool {
    let verify = || -> Result<bool, ErrorStack> {
        let mut store = X509StoreBuilder::new()?;
        store.add_cert(root.to_owned())?;
        let store = store.build();
        let chain = Stack::new()?;
        let mut ctx = X509StoreContext::new()?;
        ctx.init(&store, cert, &chain, |c| c.verify_cert())
    };
    verify().unwrap_or(false)
}

pub fn common_name(cert: &X509Ref) -> Option<String> {
    cert.subject_name()
        .entries_by_nid(Nid::COMMONNAME)
        .next()
        .and_then(|e| e.data().to_string().ok())
        .map(|s| s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn csr_round_trip_and_tamper() {
        let key = generate_rsa_key().unwrap();
        let der = build_csr(&key, "vswitch-1").unwrap();
        let (req, pubkey) = verify_csr(&der).unwrap();
        assert!(pubkey.public_eq(&key));
        assert_eq!(
            req.subject_name().entries_by_nid(Nid::COMMONNAME).next().unwrap().data().to_string().unwrap(),
            "vswitch-1"
        );
        let mut bad = der.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        assert!(matches!(verify_csr(&bad), Err(PkiError::CsrSignature)));
        assert!(matches!(verify_csr(b"not a csr"), Err(PkiError::MalformedCsr(_))));
    }

    #[test]
    fn small_rsa_keys_rejected() {
        let key = PKey::from_rsa(Rsa::generate(1024).unwrap()).unwrap();
        let der = build_csr(&key, "weak").unwrap();
        assert!(matches!(verify_csr(&der), Err(PkiError::WeakKey(_))));
    }

    #[test]
    fn seeded_ec_key_is_reproducible() {
        let a = ec_key_from_seed(&[1; 32]).unwrap();
        let b = ec_key_from_seed(&[1; 32]).unwrap();
        let c = ec_key_from_seed(&[2; 32]).unwrap();
        assert!(a.public_eq(&b));
        assert!(!a.public_eq(&c));
    }

    #[test]
    fn issued_leaf_chains_only_to_its_root() {
        let mut rng = seeded("t", "pki");
        let root_key = ec_key_from_seed(&[3; 32]).unwrap();
        let root = self_signed_root(&root_key, "root", &random_serial(&mut rng).unwrap(), 86_400).unwrap();
        let other_key = ec_key_from_seed(&[4; 32]).unwrap();
        let other = self_signed_root(&other_key, "root", &random_serial(&mut rng).unwrap(), 86_400).unwrap();
        assert!(chains_to(&root, &root));

        let leaf_key = generate_rsa_key().unwrap();
        let (req, pubkey) = verify_csr(&build_csr(&leaf_key, "leaf").unwrap()).unwrap();
        let leaf = issue_leaf(
            &root_key,
            &root,
            req.subject_name(),
            &pubkey,
            &random_serial(&mut rng).unwrap(),
            3600,
            &[CertUsage::Client],
        )
        .unwrap();
        assert!(chains_to(&leaf, &root));
        assert!(!chains_to(&leaf, &other));
        assert_eq!(common_name(&leaf).as_deref(), Some("leaf"));

        let rogue = self_signed_leaf(&leaf_key, "leaf").unwrap();
        assert!(!chains_to(&rogue, &root));
    }
}
