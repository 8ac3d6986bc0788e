//! Hashing and signature primitives shared across the ledger and service.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use sha2::{Digest, Sha256};

/// A 32-byte SHA-256 digest.
pub type Hash = [u8; 32];

/// The all-zero hash used as the genesis block's previous-hash.
pub const ZERO_HASH: Hash = [0u8; 32];

pub fn sha256(bytes: &[u8]) -> Hash {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

/// Binary Merkle root over the given leaves.
///
/// A single leaf is its own root. Odd levels duplicate their last node.
/// Zero leaves hash to the digest of the empty string so an empty block
/// still has a well-defined data hash.
pub fn merkle_root(leaves: &[Hash]) -> Hash {
    if leaves.is_empty() {
        return sha256(&[]);
    }
    let mut level: Vec<Hash> = leaves.to_vec();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().unwrap());
        }
        level = level
            .chunks(2)
            .map(|pair| {
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&pair[0]);
                buf[32..].copy_from_slice(&pair[1]);
                sha256(&buf)
            })
            .collect();
    }
    level[0]
}

/// An organization's Ed25519 signing identity.
#[derive(Clone)]
pub struct OrgKeypair {
    pub org_id: String,
    signing: SigningKey,
}

impl OrgKeypair {
    /// Generate a fresh keypair from OS entropy.
    pub fn generate(org_id: &str) -> Self {
        let mut seed = [0u8; 32];
        use rand::RngCore;
        rand::rngs::OsRng.fill_bytes(&mut seed);
        Self::from_seed(org_id, seed)
    }

    pub fn from_seed(org_id: &str, seed: [u8; 32]) -> Self {
        Self {
            org_id: org_id.to_string(),
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_secret_hex(org_id: &str, hex_seed: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(hex_seed).map_err(|_| CryptoError::BadKey)?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::BadKey)?;
        Ok(Self::from_seed(org_id, seed))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.signing.to_bytes())
    }

    pub fn public_hex(&self) -> String {
        hex::encode(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.signing.sign(message).to_bytes().to_vec()
    }
}

/// Verify `signature` over `message` against a hex-encoded Ed25519 public key.
pub fn verify_signature(public_hex: &str, message: &[u8], signature: &[u8]) -> Result<(), CryptoError> {
    let bytes = hex::decode(public_hex).map_err(|_| CryptoError::BadKey)?;
    let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::BadKey)?;
    let key = VerifyingKey::from_bytes(&arr).map_err(|_| CryptoError::BadKey)?;
    let sig_arr: [u8; 64] = signature.try_into().map_err(|_| CryptoError::BadSignature)?;
    let sig = Signature::from_bytes(&sig_arr);
    key.verify(message, &sig).map_err(|_| CryptoError::BadSignature)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key material")]
    BadKey,
    #[error("signature verification failed")]
    BadSignature,
}
