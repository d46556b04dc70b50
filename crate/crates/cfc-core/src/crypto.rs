//! Shared cryptographic primitives.
//!
//! All digests are SHA-256. Signatures are Ed25519 with a domain string
//! mixed into every signed message. The hybrid wrap is a single-shot
//! encapsulate/decapsulate scheme (X25519 KEM + HKDF-SHA256 + ChaCha20-
//! Poly1305); payload encryption is ChaCha20-Poly1305 with caller-supplied
//! associated data.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hpke::aead::ChaCha20Poly1305 as WrapAead;
use hpke::kdf::HkdfSha256;
use hpke::kem::X25519HkdfSha256;
use hpke::{Deserializable, Kem, OpModeR, OpModeS, Serializable};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

type WrapKem = X25519HkdfSha256;

pub const AEAD_NONCE_LEN: usize = 12;
pub const DATA_KEY_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("authenticated decryption failed")]
    AuthFailure,
    #[error("key wrap failed: {0}")]
    WrapFailure(String),
}

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest32(#[serde(with = "crate::encoding::b64arr")] pub [u8; 32]);

impl Digest32 {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s).ok()?;
        Some(Self(raw.try_into().ok()?))
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

/// A 16-byte identifier (blob ids, key ids, nonces, truncated key digests).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Id16(#[serde(with = "crate::encoding::b64arr")] pub [u8; 16]);

impl Id16 {
    pub fn random(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut raw = [0u8; 16];
        rng.fill_bytes(&mut raw);
        Self(raw)
    }

    /// Key ids are the SHA-256 of the public key bytes, truncated to 16 bytes.
    pub fn of_public_key(public_key: &[u8]) -> Self {
        let digest = Sha256::digest(public_key);
        let mut raw = [0u8; 16];
        raw.copy_from_slice(&digest[..16]);
        Self(raw)
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s).ok()?;
        Some(Self(raw.try_into().ok()?))
    }
}

impl fmt::Debug for Id16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl fmt::Display for Id16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

/// Ed25519 public key bytes as they appear in serialized records.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VerifyingKeyBytes(#[serde(with = "crate::encoding::b64arr")] pub [u8; 32]);

impl VerifyingKeyBytes {
    pub fn of(key: &VerifyingKey) -> Self {
        Self(key.to_bytes())
    }

    pub fn key_id(&self) -> Id16 {
        Id16::of_public_key(&self.0)
    }
}

impl fmt::Debug for VerifyingKeyBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyingKeyBytes({})", hex::encode(self.0))
    }
}

/// 32-byte symmetric key protecting one blob payload.
#[derive(Clone, PartialEq, Eq)]
pub struct DataKey(pub [u8; DATA_KEY_LEN]);

impl DataKey {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut raw = [0u8; DATA_KEY_LEN];
        rng.fill_bytes(&mut raw);
        Self(raw)
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DataKey(..)")
    }
}

// ---------------------------------------------------------------------------
// Signatures

/// Signs `domain || 0x00 || message`; the separator keeps signatures from one
/// context unusable in another.
pub fn sign(key: &SigningKey, domain: &str, message: &[u8]) -> [u8; 64] {
    key.sign(&domain_message(domain, message)).to_bytes()
}

/// Fail-closed signature check: malformed keys or signatures verify as false.
pub fn verify(public_key: &[u8; 32], domain: &str, message: &[u8], signature: &[u8; 64]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    key.verify(&domain_message(domain, message), &Signature::from_bytes(signature))
        .is_ok()
}

fn domain_message(domain: &str, message: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(domain.len() + 1 + message.len());
    buf.extend_from_slice(domain.as_bytes());
    buf.push(0);
    buf.extend_from_slice(message);
    buf
}

// ---------------------------------------------------------------------------
// Hybrid wrap (encapsulate/decapsulate)

#[derive(Clone)]
pub struct HybridPublicKey(<WrapKem as Kem>::PublicKey);

pub struct HybridPrivateKey(<WrapKem as Kem>::PrivateKey);

impl HybridPublicKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes().to_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        <WrapKem as Kem>::PublicKey::from_bytes(bytes)
            .map(Self)
            .map_err(|e| CryptoError::MalformedKey(e.to_string()))
    }

    pub fn key_id(&self) -> Id16 {
        Id16::of_public_key(&self.to_bytes())
    }
}

impl fmt::Debug for HybridPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HybridPublicKey({})", crate::encoding::encode(&self.to_bytes()))
    }
}

impl fmt::Debug for HybridPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("HybridPrivateKey(..)")
    }
}

/// Output of a single-shot hybrid seal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridCiphertext {
    #[serde(with = "crate::encoding::b64vec")]
    pub encapsulated: Vec<u8>,
    #[serde(with = "crate::encoding::b64vec")]
    pub ciphertext: Vec<u8>,
}

pub fn hybrid_keypair(rng: &mut (impl RngCore + CryptoRng)) -> (HybridPrivateKey, HybridPublicKey) {
    let (private, public) = WrapKem::gen_keypair(rng);
    (HybridPrivateKey(private), HybridPublicKey(public))
}

/// Single-shot, sender-anonymous seal of `plaintext` to `recipient`.
pub fn hybrid_seal(
    recipient: &HybridPublicKey,
    info: &[u8],
    aad: &[u8],
    plaintext: &[u8],
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<HybridCiphertext, CryptoError> {
    let (encapsulated, ciphertext) = hpke::single_shot_seal::<WrapAead, HkdfSha256, WrapKem, _>(
        &OpModeS::Base,
        &recipient.0,
        info,
        plaintext,
        aad,
        rng,
    )
    .map_err(|e| CryptoError::WrapFailure(e.to_string()))?;
    Ok(HybridCiphertext {
        encapsulated: encapsulated.to_bytes().to_vec(),
        ciphertext,
    })
}

pub fn hybrid_open(
    key: &HybridPrivateKey,
    encapsulated: &[u8],
    info: &[u8],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let encapsulated = <WrapKem as Kem>::EncappedKey::from_bytes(encapsulated)
        .map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
    hpke::single_shot_open::<WrapAead, HkdfSha256, WrapKem>(
        &OpModeR::Base,
        &key.0,
        &encapsulated,
        info,
        ciphertext,
        aad,
    )
    .map_err(|_| CryptoError::AuthFailure)
}

// ---------------------------------------------------------------------------
// Payload AEAD

pub fn aead_seal(key: &DataKey, nonce: &[u8; AEAD_NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher
        .encrypt(nonce.into(), Payload { msg: plaintext, aad })
        .expect("AEAD encryption is infallible for in-memory payloads")
}

pub fn aead_open(
    key: &DataKey,
    nonce: &[u8; AEAD_NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher
        .decrypt(nonce.into(), Payload { msg: ciphertext, aad })
        .map_err(|_| CryptoError::AuthFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha20Rng {
        rand_chacha::ChaCha20Rng::from_seed([42; 32])
    }

    #[test]
    fn hybrid_roundtrip_and_aad_binding() {
        let mut rng = rng();
        let (private, public) = hybrid_keypair(&mut rng);
        let sealed = hybrid_seal(&public, b"test", b"aad", b"secret", &mut rng).unwrap();
        let opened =
            hybrid_open(&private, &sealed.encapsulated, b"test", b"aad", &sealed.ciphertext).unwrap();
        assert_eq!(opened, b"secret");

        let err = hybrid_open(&private, &sealed.encapsulated, b"test", b"other", &sealed.ciphertext)
            .unwrap_err();
        assert_eq!(err, CryptoError::AuthFailure);
    }

    #[test]
    fn aead_rejects_tampered_aad() {
        let key = DataKey([7; 32]);
        let nonce = [1; 12];
        let ct = aead_seal(&key, &nonce, b"header", b"payload");
        assert_eq!(aead_open(&key, &nonce, b"header", &ct).unwrap(), b"payload");
        assert_eq!(aead_open(&key, &nonce, b"headex", &ct).unwrap_err(), CryptoError::AuthFailure);
    }

    #[test]
    fn signature_domains_do_not_cross() {
        let mut rng = rng();
        let key = SigningKey::generate(&mut rng);
        let public = key.verifying_key().to_bytes();
        let sig = sign(&key, "cfc/a", b"message");
        assert!(verify(&public, "cfc/a", b"message", &sig));
        assert!(!verify(&public, "cfc/b", b"message", &sig));
    }

    #[test]
    fn key_id_is_truncated_digest() {
        let mut rng = rng();
        let (_, public) = hybrid_keypair(&mut rng);
        let id = public.key_id();
        let full = Digest32::of(&public.to_bytes());
        assert_eq!(&id.0[..], &full.0[..16]);
    }
}
