//! The untrusted host: the original partition, application writes, the
//! commit schedule and credential-free recovery.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::SectorWrite;
use crate::sed::SedDevice;
use crate::tee::{Platform, TeeError};
use crate::vaultfs::{AllocPolicy, DirEntry, FsError, FsImage, ReadOnlyFs, Region};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error(transparent)]
    Suspended(#[from] TeeError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("no protected range is configured on this drive")]
    NotProvisioned,
}

/// When the OS driver asks for a commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub interval: u64,
    pub next_fire: u64,
    pub manual_trigger_pending: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitTrigger {
    pub at: u64,
    pub manual: bool,
}

impl Schedule {
    /// First automatic fire one interval after `start`.
    pub fn new(interval: u64, start: u64) -> Self {
        Self {
            interval,
            next_fire: start + interval,
            manual_trigger_pending: false,
        }
    }

    pub fn request_manual(&mut self) {
        self.manual_trigger_pending = true;
    }

    /// Fires at most once per call. A manual request takes precedence and
    /// does not disturb the automatic cadence.
    pub fn tick(&mut self, now: u64) -> Option<CommitTrigger> {
        if self.manual_trigger_pending {
            self.manual_trigger_pending = false;
            return Some(CommitTrigger { at: now, manual: true });
        }
        if self.interval > 0 && now >= self.next_fire {
            self.next_fire += self.interval;
            return Some(CommitTrigger { at: now, manual: false });
        }
        None
    }
}

/// Host-side view of the original partition plus the OS driver.
#[derive(Debug, Clone)]
pub struct HostWorld {
    original: Region,
    fs: FsImage,
    pub schedule: Schedule,
    /// Cleared when malware removes the driver; no automatic commits then.
    pub driver_enabled: bool,
}

impl HostWorld {
    /// Formats a fresh original partition.
    pub fn format(
        sed: &mut SedDevice,
        original: Region,
        num_clusters: u32,
        cluster_size: u32,
        dir_slots: u32,
        schedule: Schedule,
    ) -> Result<Self, HostError> {
        let fs = FsImage::format_with(sed, original, num_clusters, cluster_size, dir_slots)?;
        Ok(Self {
            original,
            fs,
            schedule,
            driver_enabled: true,
        })
    }

    pub fn mount(sed: &SedDevice, original: Region, schedule: Schedule, driver_enabled: bool) -> Result<Self, HostError> {
        Ok(Self {
            original,
            fs: FsImage::mount(sed, original)?,
            schedule,
            driver_enabled,
        })
    }

    pub fn region(&self) -> Region {
        self.original
    }

    /// Re-reads on-disk metadata, e.g. after a session wrote to the partition.
    pub fn refresh(&mut self, sed: &SedDevice) -> Result<(), HostError> {
        self.fs = FsImage::mount(sed, self.original)?;
        Ok(())
    }

    pub fn list(&self) -> Vec<DirEntry> {
        self.fs.list(true)
    }

    pub fn lookup(&self, name: &str) -> Option<&DirEntry> {
        self.fs.lookup(name)
    }

    pub fn read(&mut self, sed: &SedDevice, name: &str) -> Result<Vec<u8>, HostError> {
        Ok(self.fs.read_file(sed, name)?)
    }

    fn put<D: SectorWrite + ?Sized>(&mut self, dev: &mut D, name: &str, bytes: &[u8], now: u64) -> Result<(), FsError> {
        if self.fs.lookup(name).is_some() {
            self.fs.overwrite(dev, name, bytes, now)?;
        } else {
            self.fs.create_write(dev, name, bytes, now, AllocPolicy::Cursor)?;
        }
        Ok(())
    }

    pub fn app_write(&mut self, platform: &mut Platform, name: &str, bytes: &[u8], now: u64) -> Result<(), HostError> {
        platform.host_event(now, &format!("write {name}"))?;
        self.put(&mut platform.sed, name, bytes, now)?;
        Ok(())
    }

    /// `count` rapid saves of `name`; intermediate states are distinct and
    /// only the final `bytes` survive.
    pub fn app_autosave_storm(
        &mut self,
        platform: &mut Platform,
        name: &str,
        bytes: &[u8],
        count: u32,
        now: u64,
    ) -> Result<(), HostError> {
        platform.host_event(now, &format!("storm {name} {count}"))?;
        for i in 1..count {
            let mut draft = bytes.to_vec();
            draft.extend_from_slice(format!("\n#autosave {i}").as_bytes());
            self.put(&mut platform.sed, name, &draft, now)?;
        }
        if count > 0 {
            self.put(&mut platform.sed, name, bytes, now)?;
        }
        Ok(())
    }

    pub fn delete(&mut self, platform: &mut Platform, name: &str, now: u64) -> Result<(), HostError> {
        platform.host_event(now, &format!("delete {name}"))?;
        self.fs.delete(&mut platform.sed, name)?;
        Ok(())
    }

    /// Commit trigger due at `now`, if the driver is still installed.
    pub fn tick(&mut self, now: u64) -> Option<CommitTrigger> {
        if !self.driver_enabled {
            return None;
        }
        self.schedule.tick(now)
    }
}

/// The protected region as described by the drive's own range table.
pub fn protected_region(sed: &SedDevice) -> Option<Region> {
    sed.ranges().first().map(|r| Region {
        base_lba: r.start_lba,
        sectors: r.length,
    })
}

/// Read-only view of the protected partition. Needs no credential and
/// cannot express a write.
pub fn recovery_mount(sed: &SedDevice) -> Result<ReadOnlyFs<'_, SedDevice>, HostError> {
    let region = protected_region(sed).ok_or(HostError::NotProvisioned)?;
    Ok(ReadOnlyFs::mount(sed, region)?)
}
