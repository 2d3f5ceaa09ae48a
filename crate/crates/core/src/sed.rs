//! Opal-style self-encrypting drive model.
//!
//! The drive exposes a flat sector store carved into non-overlapping locking
//! ranges. Each range carries independent read and write locks gated by a
//! 32-byte credential. LBAs outside every range form the global range, which
//! is always readable and writable. Lock state is volatile: a power cycle
//! re-engages every enabled lock.
//!
//! The device never stores credentials in the clear. It keeps a salted
//! SHA-256 verifier per credential and compares verifiers in constant time.

use std::fmt;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::block::{BlockError, Digest, SectorRead, SectorStore, SectorWrite, SECTOR_SIZE};

/// Fixed-size secret used for range and admin authentication.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential(#[serde(with = "hex32")] pub [u8; 32]);

impl Credential {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credential(<redacted>)")
    }
}

pub(crate) mod hex32 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|_| D::Error::custom("expected 32 hex-encoded bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SedError {
    #[error("credential rejected")]
    BadCredential,
    #[error("PSID rejected")]
    BadPsid,
    #[error("range overlaps existing locking range {0}")]
    OverlappingRange(u32),
    #[error("no locking range with id {0}")]
    NoSuchRange(u32),
    #[error(transparent)]
    Block(#[from] BlockError),
}

/// A contiguous LBA span with its own lock state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockingRange {
    pub range_id: u32,
    pub start_lba: u64,
    pub length: u64,
    pub write_lock_enabled: bool,
    pub read_lock_enabled: bool,
    pub write_locked: bool,
    pub read_locked: bool,
    verifier: Digest,
}

impl LockingRange {
    pub fn end_lba(&self) -> u64 {
        self.start_lba + self.length
    }

    /// Empty spans overlap nothing.
    fn overlaps(&self, lba: u64, count: u64) -> bool {
        count > 0 && lba < self.end_lba() && self.start_lba < lba + count
    }

    pub fn info(&self) -> RangeInfo {
        RangeInfo {
            range_id: self.range_id,
            start_lba: self.start_lba,
            length: self.length,
            write_lock_enabled: self.write_lock_enabled,
            read_lock_enabled: self.read_lock_enabled,
            write_locked: self.write_locked,
            read_locked: self.read_locked,
        }
    }
}

/// Public view of a locking range, as written to the image sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeInfo {
    pub range_id: u32,
    pub start_lba: u64,
    pub length: u64,
    pub write_lock_enabled: bool,
    pub read_lock_enabled: bool,
    pub write_locked: bool,
    pub read_locked: bool,
}

/// Sidecar document accompanying a raw disk image. Carries no secrets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub sector_size: usize,
    pub sector_count: u64,
    pub next_range_id: u32,
    pub ranges: Vec<RangeInfo>,
}

/// Device-internal secret material: PSID, MSID, verifier salt and the
/// verifiers for every credential. Persisted separately from the sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSecrets {
    pub psid: Credential,
    pub msid: Credential,
    #[serde(with = "hex32")]
    pub salt: [u8; 32],
    #[serde(with = "hex32")]
    pub admin_verifier: Digest,
    pub range_verifiers: Vec<(u32, String)>,
}

/// Identity fixed at manufacture time.
#[derive(Debug, Clone)]
pub struct DeviceIdentity {
    pub psid: Credential,
    pub msid: Credential,
    pub salt: [u8; 32],
}

impl DeviceIdentity {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let psid = Credential::random(rng);
        let msid = Credential::random(rng);
        let mut salt = [0u8; 32];
        rng.fill_bytes(&mut salt);
        Self { psid, msid, salt }
    }
}

/// One entry of the device command log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SedCommand {
    pub seq: u64,
    pub session: Option<u64>,
    pub op: SedOp,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SedOp {
    ConfigureRange { start_lba: u64, length: u64 },
    ChangeAdmin,
    UnlockWrite { range_id: u32 },
    LockWrite { range_id: u32 },
    UnlockRead { range_id: u32 },
    LockRead { range_id: u32 },
    Write { lba: u64, count: u64 },
    RelockAll,
    PowerCycle,
    PsidRevert,
}

/// The self-encrypting drive.
#[derive(Clone)]
pub struct SedDevice {
    store: SectorStore,
    ranges: Vec<LockingRange>,
    identity: DeviceIdentity,
    admin_verifier: Digest,
    next_range_id: u32,
    log: Vec<SedCommand>,
    session: Option<u64>,
}

impl fmt::Debug for SedDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SedDevice")
            .field("store", &self.store)
            .field("ranges", &self.ranges)
            .field("next_range_id", &self.next_range_id)
            .finish_non_exhaustive()
    }
}

fn verifier(salt: &[u8; 32], cred: &Credential) -> Digest {
    let mut h = Sha256::new();
    h.update(b"sed-credential-verifier");
    h.update(salt);
    h.update(cred.0);
    h.finalize().into()
}

impl SedDevice {
    /// Factory-fresh drive: no ranges, admin authority equal to the MSID.
    pub fn new(sector_count: u64, identity: DeviceIdentity) -> Self {
        let admin_verifier = verifier(&identity.salt, &identity.msid);
        Self {
            store: SectorStore::new(sector_count),
            ranges: Vec::new(),
            identity,
            admin_verifier,
            next_range_id: 1,
            log: Vec::new(),
            session: None,
        }
    }

    /// The manufacturer default admin credential. Readable by any host
    /// software, as on real Opal drives, until ownership is taken.
    pub fn msid(&self) -> &Credential {
        &self.identity.msid
    }

    /// The PSID printed on the drive label. Only reachable by physical
    /// (operator) actions in the simulation.
    pub fn psid_label(&self) -> &Credential {
        &self.identity.psid
    }

    fn check(&self, expected: &Digest, cred: &Credential) -> bool {
        let got = verifier(&self.identity.salt, cred);
        bool::from(got.ct_eq(expected))
    }

    fn record(&mut self, op: SedOp, accepted: bool) {
        let seq = self.log.len() as u64;
        self.log.push(SedCommand {
            seq,
            session: self.session,
            op,
            accepted,
        });
    }

    /// Tags subsequent log records with a TEE session id.
    pub fn set_session_tag(&mut self, session: Option<u64>) {
        self.session = session;
    }

    pub fn command_log(&self) -> &[SedCommand] {
        &self.log
    }

    pub fn clear_command_log(&mut self) {
        self.log.clear();
    }

    pub fn ranges(&self) -> &[LockingRange] {
        &self.ranges
    }

    pub fn range(&self, range_id: u32) -> Option<&LockingRange> {
        self.ranges.iter().find(|r| r.range_id == range_id)
    }

    fn range_mut(&mut self, range_id: u32) -> Result<&mut LockingRange, SedError> {
        self.ranges
            .iter_mut()
            .find(|r| r.range_id == range_id)
            .ok_or(SedError::NoSuchRange(range_id))
    }

    pub fn configure_range(
        &mut self,
        admin: &Credential,
        start_lba: u64,
        length: u64,
        write_lock_enabled: bool,
        read_lock_enabled: bool,
        credential: &Credential,
    ) -> Result<u32, SedError> {
        let op = SedOp::ConfigureRange { start_lba, length };
        let result = self.try_configure(
            admin,
            start_lba,
            length,
            write_lock_enabled,
            read_lock_enabled,
            credential,
        );
        self.record(op, result.is_ok());
        result
    }

    fn try_configure(
        &mut self,
        admin: &Credential,
        start_lba: u64,
        length: u64,
        write_lock_enabled: bool,
        read_lock_enabled: bool,
        credential: &Credential,
    ) -> Result<u32, SedError> {
        if !self.check(&self.admin_verifier, admin) {
            return Err(SedError::BadCredential);
        }
        if length == 0 {
            return Err(BlockError::OutOfBounds {
                lba: start_lba,
                count: 0,
                sector_count: self.store.sector_count(),
            }
            .into());
        }
        self.store.check_bounds(start_lba, length)?;
        if let Some(r) = self.ranges.iter().find(|r| r.overlaps(start_lba, length)) {
            return Err(SedError::OverlappingRange(r.range_id));
        }
        let range_id = self.next_range_id;
        self.next_range_id += 1;
        self.ranges.push(LockingRange {
            range_id,
            start_lba,
            length,
            write_lock_enabled,
            read_lock_enabled,
            write_locked: write_lock_enabled,
            read_locked: read_lock_enabled,
            verifier: verifier(&self.identity.salt, credential),
        });
        self.ranges.sort_by_key(|r| r.start_lba);
        Ok(range_id)
    }

    /// Replaces the admin credential (taking ownership of the drive).
    pub fn change_admin(&mut self, old: &Credential, new: &Credential) -> Result<(), SedError> {
        let ok = self.check(&self.admin_verifier, old);
        self.record(SedOp::ChangeAdmin, ok);
        if !ok {
            return Err(SedError::BadCredential);
        }
        self.admin_verifier = verifier(&self.identity.salt, new);
        Ok(())
    }

    fn set_lock(
        &mut self,
        range_id: u32,
        credential: &Credential,
        write: bool,
        locked: bool,
    ) -> Result<(), SedError> {
        let salt = self.identity.salt;
        let result = match self.range_mut(range_id) {
            Err(e) => Err(e),
            Ok(range) => {
                let got = verifier(&salt, credential);
                if bool::from(got.ct_eq(&range.verifier)) {
                    if write {
                        range.write_locked = locked && range.write_lock_enabled;
                    } else {
                        range.read_locked = locked && range.read_lock_enabled;
                    }
                    Ok(())
                } else {
                    Err(SedError::BadCredential)
                }
            }
        };
        let op = match (write, locked) {
            (true, false) => SedOp::UnlockWrite { range_id },
            (true, true) => SedOp::LockWrite { range_id },
            (false, false) => SedOp::UnlockRead { range_id },
            (false, true) => SedOp::LockRead { range_id },
        };
        self.record(op, result.is_ok());
        result
    }

    pub fn unlock_write(&mut self, range_id: u32, credential: &Credential) -> Result<(), SedError> {
        self.set_lock(range_id, credential, true, false)
    }

    pub fn lock_write(&mut self, range_id: u32, credential: &Credential) -> Result<(), SedError> {
        self.set_lock(range_id, credential, true, true)
    }

    pub fn unlock_read(&mut self, range_id: u32, credential: &Credential) -> Result<(), SedError> {
        self.set_lock(range_id, credential, false, false)
    }

    pub fn lock_read(&mut self, range_id: u32, credential: &Credential) -> Result<(), SedError> {
        self.set_lock(range_id, credential, false, true)
    }

    /// Re-engages every enabled lock without authentication. Locking can
    /// only reduce access, so the command needs no credential.
    pub fn relock_all(&mut self) {
        for r in &mut self.ranges {
            r.write_locked = r.write_lock_enabled;
            r.read_locked = r.read_lock_enabled;
        }
        self.record(SedOp::RelockAll, true);
    }

    pub fn power_cycle(&mut self) {
        for r in &mut self.ranges {
            r.write_locked = r.write_lock_enabled;
            r.read_locked = r.read_lock_enabled;
        }
        self.record(SedOp::PowerCycle, true);
    }

    /// Factory revert: destroys every range, every sector and the admin
    /// credential.
    pub fn psid_revert(&mut self, psid: &Credential) -> Result<(), SedError> {
        let expected = verifier(&self.identity.salt, &self.identity.psid);
        let ok = self.check(&expected, psid);
        self.record(SedOp::PsidRevert, ok);
        if !ok {
            return Err(SedError::BadPsid);
        }
        self.ranges.clear();
        self.store.zero_all();
        self.admin_verifier = verifier(&self.identity.salt, &self.identity.msid);
        self.next_range_id = 1;
        Ok(())
    }

    /// First range that blocks a write of `count` sectors at `lba`, if any.
    pub fn write_blocker(&self, lba: u64, count: u64) -> Option<u32> {
        self.ranges
            .iter()
            .find(|r| r.write_locked && r.overlaps(lba, count))
            .map(|r| r.range_id)
    }

    pub fn digest(&self) -> Digest {
        self.store.digest()
    }

    pub fn range_digest(&self, lba: u64, count: u64) -> Result<Digest, BlockError> {
        self.store.range_digest(lba, count)
    }

    /// Raw medium access for artifact scans and image export.
    pub fn store(&self) -> &SectorStore {
        &self.store
    }

    pub fn sidecar(&self) -> ImageSidecar {
        ImageSidecar {
            sector_size: SECTOR_SIZE,
            sector_count: self.store.sector_count(),
            next_range_id: self.next_range_id,
            ranges: self.ranges.iter().map(LockingRange::info).collect(),
        }
    }

    pub fn secrets(&self) -> DeviceSecrets {
        DeviceSecrets {
            psid: self.identity.psid.clone(),
            msid: self.identity.msid.clone(),
            salt: self.identity.salt,
            admin_verifier: self.admin_verifier,
            range_verifiers: self
                .ranges
                .iter()
                .map(|r| (r.range_id, hex::encode(r.verifier)))
                .collect(),
        }
    }

    /// Writes the raw image and its JSON sidecar.
    pub fn export_image(&self, image: &Path, sidecar: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(image)?;
        let mut out = std::io::BufWriter::new(file);
        self.store.write_raw(&mut out)?;
        std::io::Write::flush(&mut out)?;
        let doc = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar, doc + "\n")
    }

    /// Rebuilds a device from a raw image, its sidecar and the device
    /// secrets. Lock flags are taken from the sidecar.
    pub fn import_image(
        image: &Path,
        sidecar: &Path,
        secrets: &DeviceSecrets,
    ) -> std::io::Result<Self> {
        let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
        let store = SectorStore::read_raw(std::io::BufReader::new(std::fs::File::open(image)?))?;
        let meta: ImageSidecar = serde_json::from_slice(&std::fs::read(sidecar)?)?;
        if meta.sector_size != SECTOR_SIZE || meta.sector_count != store.sector_count() {
            return Err(invalid(format!(
                "sidecar geometry {}x{} does not match image of {} sectors",
                meta.sector_count,
                meta.sector_size,
                store.sector_count()
            )));
        }
        let mut ranges = Vec::with_capacity(meta.ranges.len());
        for info in meta.ranges {
            let hex_verifier = secrets
                .range_verifiers
                .iter()
                .find(|(id, _)| *id == info.range_id)
                .map(|(_, v)| v)
                .ok_or_else(|| invalid(format!("no verifier for range {}", info.range_id)))?;
            let verifier: Digest = hex::decode(hex_verifier)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| invalid(format!("bad verifier for range {}", info.range_id)))?;
            ranges.push(LockingRange {
                range_id: info.range_id,
                start_lba: info.start_lba,
                length: info.length,
                write_lock_enabled: info.write_lock_enabled,
                read_lock_enabled: info.read_lock_enabled,
                write_locked: info.write_locked && info.write_lock_enabled,
                read_locked: info.read_locked && info.read_lock_enabled,
                verifier,
            });
        }
        Ok(Self {
            store,
            ranges,
            identity: DeviceIdentity {
                psid: secrets.psid.clone(),
                msid: secrets.msid.clone(),
                salt: secrets.salt,
            },
            admin_verifier: secrets.admin_verifier,
            next_range_id: meta.next_range_id,
            log: Vec::new(),
            session: None,
        })
    }
}

impl SectorRead for SedDevice {
    fn sector_count(&self) -> u64 {
        self.store.sector_count()
    }

    fn read_sectors(&self, lba: u64, count: u64) -> Result<Vec<u8>, BlockError> {
        self.store.check_bounds(lba, count)?;
        if let Some(r) = self
            .ranges
            .iter()
            .find(|r| r.read_locked && r.overlaps(lba, count))
        {
            return Err(BlockError::ReadLocked(r.range_id));
        }
        self.store.read_sectors(lba, count)
    }
}

impl SectorWrite for SedDevice {
    fn write_sectors(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        let count = (data.len() / SECTOR_SIZE) as u64;
        let result = if data.len() % SECTOR_SIZE != 0 {
            Err(BlockError::Misaligned(data.len()))
        } else if let Err(e) = self.store.check_bounds(lba, count) {
            Err(e)
        } else if let Some(id) = self.write_blocker(lba, count) {
            Err(BlockError::WriteLocked(id))
        } else {
            self.store.write_sectors(lba, data)
        };
        self.record(SedOp::Write { lba, count }, result.is_ok());
        result
    }
}
