//! Signed time tokens standing in for an authenticated NTP service.
//!
//! A token is `(time, nonce)` signed with Ed25519 over the SHA-256 of the
//! payload. Verifiers keep the last accepted time and refuse anything that
//! does not move strictly forward, which is what rules out replay.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Identifies the signature scheme used for tokens.
pub const SIGNATURE_SCHEME: &str = "ed25519-sha256";

pub const TOKEN_LEN: usize = 8 + 16 + 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimeError {
    #[error("token signature does not verify")]
    BadSignature,
    #[error("token time {time} does not advance past last accepted {last}")]
    StaleToken { time: u64, last: u64 },
    #[error("malformed token encoding")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeToken {
    pub time: u64,
    pub nonce: [u8; 16],
    pub signature: [u8; 64],
}

fn payload_digest(time: u64, nonce: &[u8; 16]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(time.to_be_bytes());
    h.update(nonce);
    h.finalize().into()
}

impl TimeToken {
    /// Fixed-order binary form: big-endian time, nonce, signature.
    pub fn to_bytes(&self) -> [u8; TOKEN_LEN] {
        let mut out = [0u8; TOKEN_LEN];
        out[..8].copy_from_slice(&self.time.to_be_bytes());
        out[8..24].copy_from_slice(&self.nonce);
        out[24..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TimeError> {
        if bytes.len() != TOKEN_LEN {
            return Err(TimeError::Malformed);
        }
        Ok(Self {
            time: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            nonce: bytes[8..24].try_into().unwrap(),
            signature: bytes[24..].try_into().unwrap(),
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(text: &str) -> Result<Self, TimeError> {
        let raw = hex::decode(text.trim()).map_err(|_| TimeError::Malformed)?;
        Self::from_bytes(&raw)
    }
}

/// Public verification key of a time authority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorityKey(#[serde(with = "crate::sed::hex32")] pub [u8; 32]);

/// The signing side. Held only by the authority actor.
#[derive(Clone)]
pub struct TimeAuthority {
    key: SigningKey,
}

impl std::fmt::Debug for TimeAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeAuthority")
            .field("public", &hex::encode(self.public_key().0))
            .finish()
    }
}

impl TimeAuthority {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn public_key(&self) -> AuthorityKey {
        AuthorityKey(self.key.verifying_key().to_bytes())
    }

    pub fn issue<R: RngCore + ?Sized>(&self, time: u64, rng: &mut R) -> TimeToken {
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut nonce);
        let signature = self.key.sign(&payload_digest(time, &nonce)).to_bytes();
        TimeToken {
            time,
            nonce,
            signature,
        }
    }
}

/// Checks the signature, then strict monotonicity against `last_accepted`.
pub fn verify(token: &TimeToken, key: &AuthorityKey, last_accepted: Option<u64>) -> Result<u64, TimeError> {
    let vk = VerifyingKey::from_bytes(&key.0).map_err(|_| TimeError::BadSignature)?;
    let sig = Signature::from_bytes(&token.signature);
    vk.verify(&payload_digest(token.time, &token.nonce), &sig)
        .map_err(|_| TimeError::BadSignature)?;
    match last_accepted {
        Some(last) if token.time <= last => Err(TimeError::StaleToken {
            time: token.time,
            last,
        }),
        _ => Ok(token.time),
    }
}
