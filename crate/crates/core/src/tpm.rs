//! Secure-element model: extend-only PCRs, PCR-bound sealing and NVRAM.
//!
//! Sealing is authenticated encryption (ChaCha20-Poly1305) under a key
//! derived from the device root secret and the digest of the PCR policy, so
//! a blob can only be opened while the bound registers hold the values they
//! held at seal time.

use std::collections::BTreeMap;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::block::Digest;
use crate::sed::hex32;

pub const PCR_COUNT: usize = 24;

/// Register extended with the measurement of a late-launched program.
pub const LAUNCH_PCR: usize = 17;

/// Dynamic registers; only the late-launch locality may reset or extend them.
pub const DYNAMIC_PCRS: std::ops::RangeInclusive<usize> = 17..=22;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TpmError {
    #[error("PCR index {0} out of range")]
    BadIndex(usize),
    #[error("PCR {0} is not accessible from this locality")]
    LocalityDenied(usize),
    #[error("PCR policy not satisfied")]
    PolicyMismatch,
    #[error("sealed blob failed integrity check")]
    CorruptBlob,
    #[error("nothing to seal")]
    EmptyPlaintext,
    #[error("NVRAM index {0:#x} is not defined")]
    Undefined(u32),
    #[error("NVRAM index {0:#x} is already defined")]
    AlreadyDefined(u32),
}

/// Who is issuing a PCR command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locality {
    /// Ordinary host software, including a fully privileged OS.
    Host,
    /// The measured late-launch environment.
    LateLaunch,
}

/// An expected value for one register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcrBinding {
    pub index: u8,
    #[serde(with = "hex32")]
    pub expected: Digest,
}

/// Hash-chain value of `old` extended by `measurement`.
pub fn extend_value(old: &Digest, measurement: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update(old);
    h.update(measurement);
    h.finalize().into()
}

/// Digest identifying a set of PCR bindings, independent of their order.
pub fn policy_digest(bindings: &[PcrBinding]) -> Digest {
    let mut sorted = bindings.to_vec();
    sorted.sort_by_key(|b| (b.index, b.expected));
    let mut h = Sha256::new();
    h.update(b"pcr-policy");
    h.update((sorted.len() as u32).to_be_bytes());
    for b in &sorted {
        h.update([b.index]);
        h.update(b.expected);
    }
    h.finalize().into()
}

/// Ciphertext bound to a PCR policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub bindings: Vec<PcrBinding>,
    pub policy_digest: Digest,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub integrity_tag: [u8; 16],
}

const BLOB_MAGIC: &[u8; 4] = b"SVSB";

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 1 + self.bindings.len() * 33 + 32 + 12 + 16 + 4 + self.ciphertext.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.push(self.bindings.len() as u8);
        for b in &self.bindings {
            out.push(b.index);
            out.extend_from_slice(&b.expected);
        }
        out.extend_from_slice(&self.policy_digest);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.integrity_tag);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TpmError> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], TpmError> {
            if cur.len() < n {
                return Err(TpmError::CorruptBlob);
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != BLOB_MAGIC {
            return Err(TpmError::CorruptBlob);
        }
        let n = take(1)?[0] as usize;
        let mut bindings = Vec::with_capacity(n);
        for _ in 0..n {
            let index = take(1)?[0];
            let expected: Digest = take(32)?.try_into().unwrap();
            bindings.push(PcrBinding { index, expected });
        }
        let policy_digest: Digest = take(32)?.try_into().unwrap();
        let nonce: [u8; 12] = take(12)?.try_into().unwrap();
        let integrity_tag: [u8; 16] = take(16)?.try_into().unwrap();
        let len = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let ciphertext = take(len)?.to_vec();
        if !cur.is_empty() {
            return Err(TpmError::CorruptBlob);
        }
        Ok(Self {
            bindings,
            policy_digest,
            nonce,
            ciphertext,
            integrity_tag,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NvramSlot {
    pub index: u32,
    #[serde(with = "hex::serde")]
    pub data: Vec<u8>,
    pub read_policy: Vec<PcrBinding>,
    pub defined: bool,
}

/// Persistent TPM state, as saved in the simulator state file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpmState {
    pub pcrs: Vec<String>,
    pub nvram: Vec<NvramSlot>,
    #[serde(with = "hex32")]
    pub root_secret: [u8; 32],
    pub seal_counter: u64,
}

#[derive(Clone)]
pub struct Tpm {
    pcrs: [Digest; PCR_COUNT],
    nvram: BTreeMap<u32, NvramSlot>,
    root_secret: [u8; 32],
    seal_counter: u64,
}

impl std::fmt::Debug for Tpm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tpm")
            .field("nvram_indices", &self.nvram.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

fn check_index(index: usize) -> Result<(), TpmError> {
    if index < PCR_COUNT {
        Ok(())
    } else {
        Err(TpmError::BadIndex(index))
    }
}

impl Tpm {
    pub fn new<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut root_secret = [0u8; 32];
        rng.fill_bytes(&mut root_secret);
        Self::with_root_secret(root_secret)
    }

    pub fn with_root_secret(root_secret: [u8; 32]) -> Self {
        Self {
            pcrs: [[0u8; 32]; PCR_COUNT],
            nvram: BTreeMap::new(),
            root_secret,
            seal_counter: 0,
        }
    }

    pub fn pcr(&self, index: usize) -> Result<Digest, TpmError> {
        check_index(index)?;
        Ok(self.pcrs[index])
    }

    pub fn pcrs(&self) -> &[Digest; PCR_COUNT] {
        &self.pcrs
    }

    /// Extends a register from the late-launch locality.
    pub fn pcr_extend(&mut self, index: usize, measurement: &Digest) -> Result<Digest, TpmError> {
        self.pcr_extend_from(Locality::LateLaunch, index, measurement)
    }

    pub fn pcr_extend_from(
        &mut self,
        locality: Locality,
        index: usize,
        measurement: &Digest,
    ) -> Result<Digest, TpmError> {
        check_index(index)?;
        if locality == Locality::Host && DYNAMIC_PCRS.contains(&index) {
            return Err(TpmError::LocalityDenied(index));
        }
        let next = extend_value(&self.pcrs[index], measurement);
        self.pcrs[index] = next;
        Ok(next)
    }

    /// Resets one dynamic register to its boot value. Late-launch only.
    pub fn reset_dynamic(&mut self, locality: Locality, index: usize) -> Result<(), TpmError> {
        check_index(index)?;
        if locality != Locality::LateLaunch || !DYNAMIC_PCRS.contains(&index) {
            return Err(TpmError::LocalityDenied(index));
        }
        self.pcrs[index] = [0u8; 32];
        Ok(())
    }

    /// Platform reset: every PCR returns to its initial value, NVRAM persists.
    pub fn reset_on_boot(&mut self) {
        self.pcrs = [[0u8; 32]; PCR_COUNT];
    }

    /// Bindings pinning each listed register to its current value.
    pub fn bind_current(&self, indices: &[usize]) -> Result<Vec<PcrBinding>, TpmError> {
        indices
            .iter()
            .map(|&i| {
                check_index(i)?;
                Ok(PcrBinding {
                    index: i as u8,
                    expected: self.pcrs[i],
                })
            })
            .collect()
    }

    pub fn policy_satisfied(&self, bindings: &[PcrBinding]) -> Result<bool, TpmError> {
        for b in bindings {
            check_index(b.index as usize)?;
        }
        Ok(bindings
            .iter()
            .all(|b| self.pcrs[b.index as usize] == b.expected))
    }

    fn cipher(&self, policy: &Digest) -> ChaCha20Poly1305 {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.root_secret)
            .expect("HMAC accepts any key length");
        mac.update(b"seal-key");
        mac.update(policy);
        let key = mac.finalize().into_bytes();
        ChaCha20Poly1305::new(Key::from_slice(&key))
    }

    pub fn seal(&mut self, plaintext: &[u8], bindings: &[PcrBinding]) -> Result<SealedBlob, TpmError> {
        if plaintext.is_empty() {
            return Err(TpmError::EmptyPlaintext);
        }
        for b in bindings {
            check_index(b.index as usize)?;
        }
        let policy = policy_digest(bindings);
        self.seal_counter += 1;
        let mut nonce = [0u8; 12];
        nonce[4..].copy_from_slice(&self.seal_counter.to_be_bytes());
        let mut buf = plaintext.to_vec();
        let tag = self
            .cipher(&policy)
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), &policy, &mut buf)
            .expect("in-memory encryption cannot fail");
        Ok(SealedBlob {
            bindings: bindings.to_vec(),
            policy_digest: policy,
            nonce,
            ciphertext: buf,
            integrity_tag: tag.into(),
        })
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, TpmError> {
        if policy_digest(&blob.bindings) != blob.policy_digest {
            return Err(TpmError::CorruptBlob);
        }
        if !self.policy_satisfied(&blob.bindings)? {
            return Err(TpmError::PolicyMismatch);
        }
        self.open(blob)
    }

    fn open(&self, blob: &SealedBlob) -> Result<Vec<u8>, TpmError> {
        let mut buf = blob.ciphertext.clone();
        self.cipher(&blob.policy_digest)
            .decrypt_in_place_detached(
                Nonce::from_slice(&blob.nonce),
                &blob.policy_digest,
                &mut buf,
                Tag::from_slice(&blob.integrity_tag),
            )
            .map_err(|_| TpmError::CorruptBlob)?;
        Ok(buf)
    }

    /// Opens a blob without consulting the PCRs.
    ///
    /// This is the simulator's ground-truth view, used only when scoring
    /// attack outcomes. Neither host software nor TEE programs reach it.
    pub fn evaluator_open(&self, blob: &SealedBlob) -> Result<Vec<u8>, TpmError> {
        self.open(blob)
    }

    /// Raw NVRAM contents for the simulator's ground-truth view.
    pub fn evaluator_nvram(&self, index: u32) -> Option<&[u8]> {
        self.nvram.get(&index).map(|s| s.data.as_slice())
    }

    pub fn nvram_define(&mut self, index: u32, read_policy: Vec<PcrBinding>) -> Result<(), TpmError> {
        for b in &read_policy {
            check_index(b.index as usize)?;
        }
        if self.nvram.contains_key(&index) {
            return Err(TpmError::AlreadyDefined(index));
        }
        self.nvram.insert(
            index,
            NvramSlot {
                index,
                data: Vec::new(),
                read_policy,
                defined: true,
            },
        );
        Ok(())
    }

    fn slot_checked(&self, index: u32) -> Result<&NvramSlot, TpmError> {
        let slot = self
            .nvram
            .get(&index)
            .filter(|s| s.defined)
            .ok_or(TpmError::Undefined(index))?;
        if !self.policy_satisfied(&slot.read_policy)? {
            return Err(TpmError::PolicyMismatch);
        }
        Ok(slot)
    }

    /// Writes are gated by the same PCR policy as reads.
    pub fn nvram_write(&mut self, index: u32, data: &[u8]) -> Result<(), TpmError> {
        self.slot_checked(index)?;
        let slot = self.nvram.get_mut(&index).expect("checked above");
        slot.data = data.to_vec();
        Ok(())
    }

    pub fn nvram_read(&self, index: u32) -> Result<Vec<u8>, TpmError> {
        Ok(self.slot_checked(index)?.data.clone())
    }

    pub fn nvram_is_defined(&self, index: u32) -> bool {
        self.nvram.get(&index).is_some_and(|s| s.defined)
    }

    pub fn state(&self) -> TpmState {
        TpmState {
            pcrs: self.pcrs.iter().map(hex::encode).collect(),
            nvram: self.nvram.values().cloned().collect(),
            root_secret: self.root_secret,
            seal_counter: self.seal_counter,
        }
    }

    pub fn from_state(state: &TpmState) -> Result<Self, String> {
        if state.pcrs.len() != PCR_COUNT {
            return Err(format!("expected {PCR_COUNT} PCR values, got {}", state.pcrs.len()));
        }
        let mut pcrs = [[0u8; 32]; PCR_COUNT];
        for (slot, text) in pcrs.iter_mut().zip(&state.pcrs) {
            *slot = hex::decode(text)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| format!("bad PCR value {text:?}"))?;
        }
        Ok(Self {
            pcrs,
            nvram: state.nvram.iter().map(|s| (s.index, s.clone())).collect(),
            root_secret: state.root_secret,
            seal_counter: state.seal_counter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tpm() -> Tpm {
        Tpm::new(&mut ChaCha20Rng::seed_from_u64(1))
    }

    fn sha(bytes: &[u8]) -> Digest {
        Sha256::digest(bytes).into()
    }

    #[test]
    fn extend_from_zero() {
        let mut t = tpm();
        let m = sha(b"m");
        let mut expected_input = vec![0u8; 32];
        expected_input.extend_from_slice(&m);
        assert_eq!(t.pcr_extend(17, &m).unwrap(), sha(&expected_input));
        assert_eq!(t.pcr_extend(24, &m), Err(TpmError::BadIndex(24)));
    }

    #[test]
    fn host_cannot_touch_dynamic_registers() {
        let mut t = tpm();
        let m = sha(b"m");
        assert_eq!(
            t.pcr_extend_from(Locality::Host, LAUNCH_PCR, &m),
            Err(TpmError::LocalityDenied(LAUNCH_PCR))
        );
        assert!(t.pcr_extend_from(Locality::Host, 10, &m).is_ok());
        assert_eq!(
            t.reset_dynamic(Locality::Host, LAUNCH_PCR),
            Err(TpmError::LocalityDenied(LAUNCH_PCR))
        );
        assert_eq!(
            t.reset_dynamic(Locality::LateLaunch, 3),
            Err(TpmError::LocalityDenied(3))
        );
    }

    #[test]
    fn seal_unseal_binding() {
        let mut t = tpm();
        t.pcr_extend(17, &sha(b"updater")).unwrap();
        let bindings = t.bind_current(&[17]).unwrap();
        let blob = t.seal(b"secret", &bindings).unwrap();
        assert_eq!(t.unseal(&blob).unwrap(), b"secret");
        t.pcr_extend(17, &sha(b"x")).unwrap();
        assert_eq!(t.unseal(&blob), Err(TpmError::PolicyMismatch));
        assert_eq!(t.seal(b"", &bindings), Err(TpmError::EmptyPlaintext));
        let bad = [PcrBinding { index: 30, expected: [0; 32] }];
        assert_eq!(t.seal(b"x", &bad), Err(TpmError::BadIndex(30)));
    }

    #[test]
    fn tampering_is_detected() {
        let mut t = tpm();
        let bindings = t.bind_current(&[17]).unwrap();
        let blob = t.seal(b"payload bytes", &bindings).unwrap();

        let mut flipped = blob.clone();
        flipped.ciphertext[3] ^= 0x01;
        assert_eq!(t.unseal(&flipped), Err(TpmError::CorruptBlob));

        let mut tag = blob.clone();
        tag.integrity_tag[0] ^= 0x80;
        assert_eq!(t.unseal(&tag), Err(TpmError::CorruptBlob));

        // Rebinding to the current (different) PCR value changes the key.
        let mut rebound = blob.clone();
        rebound.bindings[0].expected = sha(b"other");
        rebound.policy_digest = policy_digest(&rebound.bindings);
        t.pcr_extend(17, &[0u8; 32]).unwrap();
        rebound.bindings[0].expected = t.pcr(17).unwrap();
        rebound.policy_digest = policy_digest(&rebound.bindings);
        assert_eq!(t.unseal(&rebound), Err(TpmError::CorruptBlob));
    }

    #[test]
    fn blob_bytes_roundtrip_and_truncation() {
        let mut t = tpm();
        let bindings = t.bind_current(&[17, 18]).unwrap();
        let blob = t.seal(b"abc", &bindings).unwrap();
        let bytes = blob.to_bytes();
        assert_eq!(SealedBlob::from_bytes(&bytes).unwrap(), blob);
        assert_eq!(
            SealedBlob::from_bytes(&bytes[..bytes.len() - 1]),
            Err(TpmError::CorruptBlob)
        );
    }

    #[test]
    fn nvram_policy_and_persistence() {
        let mut t = tpm();
        t.pcr_extend(17, &sha(b"updater")).unwrap();
        let policy = t.bind_current(&[17]).unwrap();
        assert_eq!(t.nvram_read(0x1500), Err(TpmError::Undefined(0x1500)));
        t.nvram_define(0x1500, policy.clone()).unwrap();
        assert_eq!(
            t.nvram_define(0x1500, policy),
            Err(TpmError::AlreadyDefined(0x1500))
        );
        t.nvram_write(0x1500, b"data").unwrap();
        assert_eq!(t.nvram_read(0x1500).unwrap(), b"data");

        t.pcr_extend(17, &sha(b"drift")).unwrap();
        assert_eq!(t.nvram_read(0x1500), Err(TpmError::PolicyMismatch));
        assert_eq!(t.nvram_write(0x1500, b"evil"), Err(TpmError::PolicyMismatch));

        t.reset_on_boot();
        assert_eq!(t.pcr(17).unwrap(), [0u8; 32]);
        t.pcr_extend(17, &sha(b"updater")).unwrap();
        assert_eq!(t.nvram_read(0x1500).unwrap(), b"data");
    }

    #[test]
    fn state_roundtrip() {
        let mut t = tpm();
        t.pcr_extend(4, &sha(b"a")).unwrap();
        t.nvram_define(7, vec![]).unwrap();
        t.nvram_write(7, b"z").unwrap();
        let back = Tpm::from_state(&t.state()).unwrap();
        assert_eq!(back.state(), t.state());
    }
}
