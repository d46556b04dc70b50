//! Two-layer blob encryption and the `.cfcb` wire format.
//!
//! A fresh data key AEAD-encrypts the payload with the serialized header as
//! associated data; the data key itself is hybrid-wrapped to the ledger's
//! public key with the access-policy digest as associated data. Flipping any
//! byte of the header or ciphertext therefore fails decryption, and the
//! wrapped key cannot be released against a different policy.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{
    aead_open, aead_seal, hybrid_open, hybrid_seal, CryptoError, DataKey, Digest32, HybridPrivateKey,
    HybridPublicKey, Id16, AEAD_NONCE_LEN,
};

pub const BLOB_MAGIC: [u8; 4] = *b"CFCB";
pub const BLOB_VERSION: u8 = 1;
/// File extension for serialized blobs.
pub const BLOB_FILE_EXTENSION: &str = "cfcb";

/// Domain string for the data-key wrap.
const WRAP_INFO: &[u8] = b"cfc/data-key-wrap/v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("blob truncated: {0}")]
    Truncated(&'static str),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("authenticated decryption failed")]
    AuthFailure,
}

impl From<CryptoError> for EnvelopeError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::MalformedKey(m) => EnvelopeError::MalformedKey(m),
            CryptoError::AuthFailure => EnvelopeError::AuthFailure,
            CryptoError::WrapFailure(m) => EnvelopeError::MalformedKey(m),
        }
    }
}

/// Fixed-order header preceding the ciphertext in every blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobHeader {
    pub magic: [u8; 4],
    pub version: u8,
    pub blob_id: Id16,
    pub ledger_key_id: Id16,
    pub policy_digest: Digest32,
    pub encapsulated_key: Vec<u8>,
    pub wrapped_data_key: Vec<u8>,
    pub aead_nonce: [u8; AEAD_NONCE_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBlob {
    pub header: BlobHeader,
    pub ciphertext: Vec<u8>,
}

/// Inputs for [`encrypt_blob`].
pub struct WrapRequest<'a> {
    pub plaintext: &'a [u8],
    /// Canonical digest of the policy the uploader verified.
    pub policy_digest: Digest32,
    /// Ledger public key bytes, as served in a key bundle.
    pub ledger_public_key: &'a [u8],
    pub ledger_key_id: Id16,
}

/// Encrypts a payload under a fresh data key and wraps that key to the
/// ledger, binding the policy digest as associated data.
pub fn encrypt_blob(
    req: &WrapRequest<'_>,
    rng: &mut (impl RngCore + CryptoRng),
) -> Result<EncryptedBlob, EnvelopeError> {
    let ledger_key = HybridPublicKey::from_bytes(req.ledger_public_key)?;
    let data_key = DataKey::generate(rng);
    let wrapped = hybrid_seal(&ledger_key, WRAP_INFO, &req.policy_digest.0, &data_key.0, rng)?;

    let mut aead_nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill_bytes(&mut aead_nonce);
    let header = BlobHeader {
        magic: BLOB_MAGIC,
        version: BLOB_VERSION,
        blob_id: Id16::random(rng),
        ledger_key_id: req.ledger_key_id,
        policy_digest: req.policy_digest,
        encapsulated_key: wrapped.encapsulated,
        wrapped_data_key: wrapped.ciphertext,
        aead_nonce,
    };
    let ciphertext = aead_seal(&data_key, &aead_nonce, &serialize_header(&header), req.plaintext);
    Ok(EncryptedBlob { header, ciphertext })
}

/// Decrypts a blob with a data key obtained through ledger authorization.
/// Fails atomically on any tampering or wrong key.
pub fn decrypt_blob(blob: &EncryptedBlob, data_key: &DataKey) -> Result<Vec<u8>, EnvelopeError> {
    aead_open(
        data_key,
        &blob.header.aead_nonce,
        &serialize_header(&blob.header),
        &blob.ciphertext,
    )
    .map_err(|_| EnvelopeError::AuthFailure)
}

/// Recovers the data key from a blob header using the ledger private key.
/// The policy digest in the header must equal the digest bound at wrap time.
pub fn unwrap_data_key(
    header: &BlobHeader,
    ledger_private: &HybridPrivateKey,
) -> Result<DataKey, EnvelopeError> {
    unwrap_wrapped_key(
        &header.encapsulated_key,
        &header.wrapped_data_key,
        header.policy_digest,
        ledger_private,
    )
}

/// Same as [`unwrap_data_key`] but from the raw wire fields, for callers
/// that receive header fields individually (the ledger's authorize path).
pub fn unwrap_wrapped_key(
    encapsulated_key: &[u8],
    wrapped_data_key: &[u8],
    policy_digest: Digest32,
    ledger_private: &HybridPrivateKey,
) -> Result<DataKey, EnvelopeError> {
    let raw = hybrid_open(
        ledger_private,
        encapsulated_key,
        WRAP_INFO,
        &policy_digest.0,
        wrapped_data_key,
    )?;
    let raw: [u8; 32] = raw.try_into().map_err(|_| EnvelopeError::AuthFailure)?;
    Ok(DataKey(raw))
}

/// Deterministic serialization: fixed field order, little-endian u32 length
/// prefixes for the two variable-length fields.
pub fn serialize_header(h: &BlobHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        4 + 1 + 16 + 16 + 32 + 4 + h.encapsulated_key.len() + 4 + h.wrapped_data_key.len() + 12,
    );
    out.extend_from_slice(&h.magic);
    out.push(h.version);
    out.extend_from_slice(&h.blob_id.0);
    out.extend_from_slice(&h.ledger_key_id.0);
    out.extend_from_slice(&h.policy_digest.0);
    out.extend_from_slice(&(h.encapsulated_key.len() as u32).to_le_bytes());
    out.extend_from_slice(&h.encapsulated_key);
    out.extend_from_slice(&(h.wrapped_data_key.len() as u32).to_le_bytes());
    out.extend_from_slice(&h.wrapped_data_key);
    out.extend_from_slice(&h.aead_nonce);
    out
}

/// Parses a header from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn parse_header(bytes: &[u8]) -> Result<(BlobHeader, usize), EnvelopeError> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cursor.take(4, "magic")?.try_into().unwrap();
    if magic != BLOB_MAGIC {
        return Err(EnvelopeError::BadMagic);
    }
    let version = cursor.take(1, "version")?[0];
    if version != BLOB_VERSION {
        return Err(EnvelopeError::UnsupportedVersion(version));
    }
    let blob_id = Id16(cursor.take(16, "blob_id")?.try_into().unwrap());
    let ledger_key_id = Id16(cursor.take(16, "ledger_key_id")?.try_into().unwrap());
    let policy_digest = Digest32(cursor.take(32, "policy_digest")?.try_into().unwrap());
    let encapsulated_key = cursor.take_prefixed("encapsulated_key")?.to_vec();
    let wrapped_data_key = cursor.take_prefixed("wrapped_data_key")?.to_vec();
    let aead_nonce: [u8; AEAD_NONCE_LEN] = cursor.take(AEAD_NONCE_LEN, "aead_nonce")?.try_into().unwrap();
    let header = BlobHeader {
        magic,
        version,
        blob_id,
        ledger_key_id,
        policy_digest,
        encapsulated_key,
        wrapped_data_key,
        aead_nonce,
    };
    Ok((header, cursor.pos))
}

impl EncryptedBlob {
    /// Whole-blob serialization: header then ciphertext to end of file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serialize_header(&self.header);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let (header, consumed) = parse_header(bytes)?;
        Ok(Self { header, ciphertext: bytes[consumed..].to_vec() })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], EnvelopeError> {
        if self.bytes.len() - self.pos < n {
            return Err(EnvelopeError::Truncated(field));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_prefixed(&mut self, field: &'static str) -> Result<&'a [u8], EnvelopeError> {
        let len = u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()) as usize;
        self.take(len, field)
    }
}
