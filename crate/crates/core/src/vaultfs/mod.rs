//! A minimal cluster-chain filesystem over raw sectors.
//!
//! It supports exactly what the trusted updater needs: a flat directory,
//! files stored as singly linked cluster chains, hidden and deleted flags,
//! multi-sector buffered I/O, and two allocation strategies whose cost is
//! tracked in [`FsImage::probe_counter`]:
//!
//! * [`AllocPolicy::Naive`] allocates one cluster per table traversal. Each
//!   traversal walks the whole table from entry 0, picking the first free
//!   cluster and refreshing the free-cluster count as it goes, so a k-cluster
//!   file costs `k * num_clusters` probes.
//! * [`AllocPolicy::Cursor`] resumes scanning where the previous allocation
//!   stopped and collects every cluster it needs in a single pass, wrapping
//!   at most once.

mod layout;
mod readonly;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::block::{BlockError, SectorRead, SectorWrite, SECTOR_SIZE};

pub use layout::{FsLayout, MAX_NAME_LEN};
pub use readonly::ReadOnlyFs;

use layout::Superblock;

pub const DEFAULT_CLUSTER_SIZE: u32 = 8192;
pub const DEFAULT_DIR_SLOTS: u32 = 1024;

/// Largest single device request, in sectors.
pub const MAX_REQUEST_SECTORS: u64 = 65536;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FsError {
    #[error("file {0:?} not found")]
    NotFound(String),
    #[error("file {0:?} already exists")]
    Exists(String),
    #[error("not enough free clusters: need {needed}, have {free}")]
    NoSpace { needed: u64, free: u64 },
    #[error("directory is full")]
    DirectoryFull,
    #[error("invalid file name {0:?}")]
    InvalidName(String),
    #[error("region of {available} sectors is too small, need {needed}")]
    TooSmall { needed: u64, available: u64 },
    #[error("invalid geometry: {0}")]
    BadGeometry(String),
    #[error("region does not hold a formatted image")]
    NotFormatted,
    #[error("corrupt image: {0}")]
    Corrupt(String),
    #[error("device error: {0}")]
    Device(#[from] BlockError),
}

/// One cluster-table slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterEntry {
    Free,
    EndOfChain,
    Next(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocPolicy {
    Naive,
    #[default]
    Cursor,
}

/// Cluster table plus allocation cursor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTable {
    entries: Vec<ClusterEntry>,
    cluster_size: u32,
    alloc_cursor: u32,
    free: u64,
}

impl ClusterTable {
    pub fn entries(&self) -> &[ClusterEntry] {
        &self.entries
    }

    pub fn cluster_size(&self) -> u32 {
        self.cluster_size
    }

    pub fn alloc_cursor(&self) -> u32 {
        self.alloc_cursor
    }

    pub fn free_clusters(&self) -> u64 {
        self.free
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Follows a chain from `first`. Fails on cycles, dangling links and
    /// links into free clusters.
    pub fn chain(&self, first: Option<u32>) -> Result<Vec<u32>, FsError> {
        let mut out = Vec::new();
        let mut cur = first;
        while let Some(c) = cur {
            if out.len() >= self.entries.len() {
                return Err(FsError::Corrupt(format!("cycle in chain starting at {first:?}")));
            }
            out.push(c);
            cur = match self.entries.get(c as usize) {
                Some(ClusterEntry::Next(n)) => Some(*n),
                Some(ClusterEntry::EndOfChain) => None,
                Some(ClusterEntry::Free) => {
                    return Err(FsError::Corrupt(format!("chain runs into free cluster {c}")))
                }
                None => return Err(FsError::Corrupt(format!("cluster {c} out of range"))),
            };
        }
        Ok(out)
    }
}

/// A directory record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub size: u64,
    pub created: u64,
    pub modified: u64,
    pub first_cluster: Option<u32>,
    pub hidden: bool,
    pub deleted: bool,
    /// Bumped on every overwrite of the entry.
    pub generation: u64,
}

/// Where an image lives on its device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub base_lba: u64,
    pub sectors: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoRequest {
    pub write: bool,
    pub lba: u64,
    pub sectors: u64,
}

pub fn validate_name(name: &str) -> Result<(), FsError> {
    if name.is_empty() || name.len() > MAX_NAME_LEN || name.contains(['/', '\0']) {
        return Err(FsError::InvalidName(name.to_owned()));
    }
    Ok(())
}

/// Fixed tab-separated listing: name, size, created, modified, flags.
pub fn format_listing<'a>(entries: impl IntoIterator<Item = &'a DirEntry>) -> String {
    let mut out = String::new();
    for e in entries {
        let flags = if e.hidden { "H" } else { "-" };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.name, e.size, e.created, e.modified, flags
        ));
    }
    out
}

/// Metadata shared by the mutable image and the read-only view.
#[derive(Debug, Clone)]
struct Meta {
    region: Region,
    layout: FsLayout,
    table: ClusterTable,
    slots: Vec<Option<DirEntry>>,
}

/// Splits a chain into runs of physically consecutive clusters.
fn runs(chain: &[u32]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &c in chain {
        match out.last_mut() {
            Some((start, len)) if *start + *len == c => *len += 1,
            _ => out.push((c, 1)),
        }
    }
    out
}

impl Meta {
    fn load<D: SectorRead + ?Sized>(dev: &D, region: Region, log: &mut Vec<IoRequest>) -> Result<Self, FsError> {
        let sb_bytes = dev.read_sectors(region.base_lba, 1)?;
        log.push(IoRequest { write: false, lba: region.base_lba, sectors: 1 });
        let sb = layout::decode_superblock(&sb_bytes)?;
        let lay = FsLayout::new(sb.num_clusters, sb.cluster_size, sb.dir_slots)?;
        if lay.total_sectors() > region.sectors {
            return Err(FsError::Corrupt("image larger than its region".into()));
        }
        if sb.alloc_cursor >= sb.num_clusters {
            return Err(FsError::Corrupt("allocation cursor outside table".into()));
        }

        let mut entries = Vec::with_capacity(sb.num_clusters as usize);
        for (lba, n) in request_spans(region.base_lba + lay.table_start, lay.table_sectors) {
            let bytes = dev.read_sectors(lba, n)?;
            log.push(IoRequest { write: false, lba, sectors: n });
            for word in bytes.chunks_exact(4) {
                if entries.len() == sb.num_clusters as usize {
                    break;
                }
                let w = u32::from_le_bytes(word.try_into().unwrap());
                entries.push(layout::decode_entry(w, sb.num_clusters)?);
            }
        }
        let free = entries.iter().filter(|e| **e == ClusterEntry::Free).count() as u64;

        let mut slots = Vec::with_capacity(sb.dir_slots as usize);
        for (lba, n) in request_spans(region.base_lba + lay.dir_start, sb.dir_slots as u64) {
            let bytes = dev.read_sectors(lba, n)?;
            log.push(IoRequest { write: false, lba, sectors: n });
            for s in bytes.chunks_exact(SECTOR_SIZE) {
                slots.push(layout::decode_slot(s)?);
            }
        }

        Ok(Self {
            region,
            layout: lay,
            table: ClusterTable {
                entries,
                cluster_size: sb.cluster_size,
                alloc_cursor: sb.alloc_cursor,
                free,
            },
            slots,
        })
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| matches!(s, Some(e) if !e.deleted && e.name == name))
    }

    fn entry(&self, name: &str) -> Result<&DirEntry, FsError> {
        self.find(name)
            .and_then(|i| self.slots[i].as_ref())
            .ok_or_else(|| FsError::NotFound(name.to_owned()))
    }

    fn list(&self, show_hidden: bool) -> Vec<DirEntry> {
        let mut out: Vec<DirEntry> = self
            .slots
            .iter()
            .flatten()
            .filter(|e| !e.deleted && (show_hidden || !e.hidden))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    fn read_entry<D: SectorRead + ?Sized>(
        &self,
        dev: &D,
        entry: &DirEntry,
        log: &mut Vec<IoRequest>,
    ) -> Result<Vec<u8>, FsError> {
        let chain = self.table.chain(entry.first_cluster)?;
        let cs = self.layout.cluster_size as u64;
        if entry.size > chain.len() as u64 * cs {
            return Err(FsError::Corrupt(format!("{} larger than its chain", entry.name)));
        }
        let mut out = Vec::with_capacity(entry.size as usize);
        let mut remaining = entry.size;
        for (start, len) in runs(&chain) {
            if remaining == 0 {
                break;
            }
            let run_bytes = (len as u64 * cs).min(remaining);
            let sectors = run_bytes.div_ceil(SECTOR_SIZE as u64);
            let base = self.region.base_lba + self.layout.cluster_sector(start);
            for (lba, n) in request_spans(base, sectors) {
                let bytes = dev.read_sectors(lba, n)?;
                log.push(IoRequest { write: false, lba, sectors: n });
                out.extend_from_slice(&bytes);
            }
            remaining -= run_bytes;
        }
        out.truncate(entry.size as usize);
        Ok(out)
    }
}

/// Splits `sectors` starting at `lba` into requests of at most
/// [`MAX_REQUEST_SECTORS`].
fn request_spans(lba: u64, sectors: u64) -> impl Iterator<Item = (u64, u64)> {
    (0..sectors)
        .step_by(MAX_REQUEST_SECTORS as usize)
        .map(move |off| (lba + off, (sectors - off).min(MAX_REQUEST_SECTORS)))
}

/// A mounted, writable filesystem image.
///
/// The image does not own its device; every I/O method takes the device as
/// an argument so the same image can be driven through whatever handle the
/// caller holds (a TEE session's exclusive SED handle, a bare store in tests).
/// Metadata changes are written back before each mutating call returns. If a
/// device write fails the in-memory metadata is rolled back.
#[derive(Debug, Clone)]
pub struct FsImage {
    meta: Meta,
    probe_counter: u64,
    io_log: Vec<IoRequest>,
    dirty_table: BTreeSet<u64>,
    dirty_slots: BTreeSet<u32>,
    super_dirty: bool,
    default_policy: AllocPolicy,
}

struct Snapshot {
    table: ClusterTable,
    slots: Vec<Option<DirEntry>>,
    probe_counter: u64,
}

impl FsImage {
    /// Formats `region` with `num_clusters` clusters of `cluster_size` bytes.
    pub fn format<D: SectorWrite + ?Sized>(
        dev: &mut D,
        region: Region,
        num_clusters: u32,
        cluster_size: u32,
    ) -> Result<Self, FsError> {
        Self::format_with(dev, region, num_clusters, cluster_size, DEFAULT_DIR_SLOTS)
    }

    pub fn format_with<D: SectorWrite + ?Sized>(
        dev: &mut D,
        region: Region,
        num_clusters: u32,
        cluster_size: u32,
        dir_slots: u32,
    ) -> Result<Self, FsError> {
        let lay = FsLayout::new(num_clusters, cluster_size, dir_slots)?;
        if lay.total_sectors() > region.sectors {
            return Err(FsError::TooSmall {
                needed: lay.total_sectors(),
                available: region.sectors,
            });
        }
        let mut img = Self {
            meta: Meta {
                region,
                layout: lay,
                table: ClusterTable {
                    entries: vec![ClusterEntry::Free; num_clusters as usize],
                    cluster_size,
                    alloc_cursor: 0,
                    free: num_clusters as u64,
                },
                slots: vec![None; dir_slots as usize],
            },
            probe_counter: 0,
            io_log: Vec::new(),
            dirty_table: (0..lay.table_sectors).collect(),
            dirty_slots: (0..dir_slots).collect(),
            super_dirty: true,
            default_policy: AllocPolicy::Cursor,
        };
        img.flush(dev)?;
        Ok(img)
    }

    pub fn mount<D: SectorRead + ?Sized>(dev: &D, region: Region) -> Result<Self, FsError> {
        let mut io_log = Vec::new();
        let meta = Meta::load(dev, region, &mut io_log)?;
        let sb = dev.read_sectors(region.base_lba, 1)?;
        let probe_counter = layout::decode_superblock(&sb)?.probe_counter;
        Ok(Self {
            meta,
            probe_counter,
            io_log,
            dirty_table: BTreeSet::new(),
            dirty_slots: BTreeSet::new(),
            super_dirty: false,
            default_policy: AllocPolicy::Cursor,
        })
    }

    pub fn region(&self) -> Region {
        self.meta.region
    }

    pub fn layout(&self) -> FsLayout {
        self.meta.layout
    }

    pub fn table(&self) -> &ClusterTable {
        &self.meta.table
    }

    /// Cumulative number of cluster-table entries examined by allocation.
    pub fn probe_counter(&self) -> u64 {
        self.probe_counter
    }

    pub fn io_log(&self) -> &[IoRequest] {
        &self.io_log
    }

    pub fn take_io_log(&mut self) -> Vec<IoRequest> {
        std::mem::take(&mut self.io_log)
    }

    /// Policy used when an overwrite needs to grow a chain.
    pub fn set_default_policy(&mut self, policy: AllocPolicy) {
        self.default_policy = policy;
    }

    pub fn lookup(&self, name: &str) -> Option<&DirEntry> {
        self.meta.find(name).and_then(|i| self.meta.slots[i].as_ref())
    }

    /// Live entries sorted by name; hidden ones only when asked.
    pub fn list(&self, show_hidden: bool) -> Vec<DirEntry> {
        self.meta.list(show_hidden)
    }

    /// Every slot ever used, including deleted entries, in slot order.
    pub fn raw_entries(&self) -> impl Iterator<Item = &DirEntry> {
        self.meta.slots.iter().flatten()
    }

    pub fn debug_listing(&self, show_hidden: bool) -> String {
        format_listing(&self.list(show_hidden))
    }

    pub fn clusters_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.meta.layout.cluster_size as u64)
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            table: self.meta.table.clone(),
            slots: self.meta.slots.clone(),
            probe_counter: self.probe_counter,
        }
    }

    fn restore(&mut self, snap: Snapshot) {
        self.meta.table = snap.table;
        self.meta.slots = snap.slots;
        self.probe_counter = snap.probe_counter;
        self.dirty_table.clear();
        self.dirty_slots.clear();
        self.super_dirty = false;
    }

    /// Runs a mutation; on error the metadata is rolled back.
    fn transact<D, T>(
        &mut self,
        dev: &mut D,
        op: impl FnOnce(&mut Self, &mut D) -> Result<T, FsError>,
    ) -> Result<T, FsError>
    where
        D: SectorWrite + ?Sized,
    {
        let snap = self.snapshot();
        let result = op(self, dev).and_then(|v| self.flush(dev).map(|_| v));
        if result.is_err() {
            self.restore(snap);
        }
        result
    }

    fn set_entry(&mut self, cluster: u32, e: ClusterEntry) {
        let old = std::mem::replace(&mut self.meta.table.entries[cluster as usize], e);
        match (old == ClusterEntry::Free, e == ClusterEntry::Free) {
            (true, false) => self.meta.table.free -= 1,
            (false, true) => self.meta.table.free += 1,
            _ => {}
        }
        self.dirty_table.insert(cluster as u64 * 4 / SECTOR_SIZE as u64);
    }

    fn set_slot(&mut self, idx: usize, entry: Option<DirEntry>) {
        self.meta.slots[idx] = entry;
        self.dirty_slots.insert(idx as u32);
    }

    /// Reserves `k` clusters (each marked end-of-chain, unlinked).
    fn allocate(&mut self, k: u64, policy: AllocPolicy) -> Result<Vec<u32>, FsError> {
        let free = self.meta.table.free;
        if k > free {
            return Err(FsError::NoSpace { needed: k, free });
        }
        let n = self.meta.table.entries.len();
        let mut got = Vec::with_capacity(k as usize);
        match policy {
            AllocPolicy::Naive => {
                for _ in 0..k {
                    let mut first = None;
                    let mut free_seen = 0u64;
                    for (i, e) in self.meta.table.entries.iter().enumerate() {
                        if *e == ClusterEntry::Free {
                            free_seen += 1;
                            if first.is_none() {
                                first = Some(i as u32);
                            }
                        }
                    }
                    self.probe_counter += n as u64;
                    debug_assert_eq!(free_seen, self.meta.table.free);
                    let c = first.expect("free count checked above");
                    self.set_entry(c, ClusterEntry::EndOfChain);
                    got.push(c);
                }
            }
            AllocPolicy::Cursor => {
                let mut idx = self.meta.table.alloc_cursor as usize;
                let mut examined = 0u64;
                while (got.len() as u64) < k && examined < n as u64 {
                    examined += 1;
                    if self.meta.table.entries[idx] == ClusterEntry::Free {
                        self.set_entry(idx as u32, ClusterEntry::EndOfChain);
                        got.push(idx as u32);
                    }
                    idx = (idx + 1) % n;
                }
                self.probe_counter += examined;
                self.meta.table.alloc_cursor = idx as u32;
            }
        }
        self.super_dirty = true;
        Ok(got)
    }

    /// Links `clusters` in order, ending the chain at the last one.
    fn link(&mut self, clusters: &[u32]) {
        for pair in clusters.windows(2) {
            self.set_entry(pair[0], ClusterEntry::Next(pair[1]));
        }
        if let Some(&last) = clusters.last() {
            self.set_entry(last, ClusterEntry::EndOfChain);
        }
    }

    fn write_chain<D: SectorWrite + ?Sized>(
        &mut self,
        dev: &mut D,
        chain: &[u32],
        bytes: &[u8],
    ) -> Result<(), FsError> {
        let cs = self.meta.layout.cluster_size as usize;
        let mut offset = 0usize;
        for (start, len) in runs(chain) {
            if offset >= bytes.len() {
                break;
            }
            let run_bytes = (len as usize * cs).min(bytes.len() - offset);
            let sectors = run_bytes.div_ceil(SECTOR_SIZE) as u64;
            let base = self.meta.region.base_lba + self.meta.layout.cluster_sector(start);
            for (lba, n) in request_spans(base, sectors) {
                let lo = offset + ((lba - base) as usize * SECTOR_SIZE);
                let hi = (lo + n as usize * SECTOR_SIZE).min(bytes.len());
                let mut buf = bytes[lo..hi].to_vec();
                buf.resize(n as usize * SECTOR_SIZE, 0);
                dev.write_sectors(lba, &buf)?;
                self.io_log.push(IoRequest { write: true, lba, sectors: n });
            }
            offset += run_bytes;
        }
        Ok(())
    }

    fn free_slot(&self) -> Result<usize, FsError> {
        self.meta
            .slots
            .iter()
            .position(Option::is_none)
            .or_else(|| {
                self.meta
                    .slots
                    .iter()
                    .position(|s| s.as_ref().is_some_and(|e| e.deleted))
            })
            .ok_or(FsError::DirectoryFull)
    }

    pub fn create_write<D: SectorWrite + ?Sized>(
        &mut self,
        dev: &mut D,
        name: &str,
        bytes: &[u8],
        timestamp: u64,
        policy: AllocPolicy,
    ) -> Result<DirEntry, FsError> {
        validate_name(name)?;
        if self.meta.find(name).is_some() {
            return Err(FsError::Exists(name.to_owned()));
        }
        let slot = self.free_slot()?;
        let k = self.clusters_for(bytes.len() as u64);
        self.transact(dev, |fs, dev| {
            let clusters = fs.allocate(k, policy)?;
            fs.link(&clusters);
            fs.write_chain(dev, &clusters, bytes)?;
            let entry = DirEntry {
                name: name.to_owned(),
                size: bytes.len() as u64,
                created: timestamp,
                modified: timestamp,
                first_cluster: clusters.first().copied(),
                hidden: false,
                deleted: false,
                generation: 0,
            };
            fs.set_slot(slot, Some(entry.clone()));
            Ok(entry)
        })
    }

    pub fn read_file<D: SectorRead + ?Sized>(&mut self, dev: &D, name: &str) -> Result<Vec<u8>, FsError> {
        let entry = self.meta.entry(name)?.clone();
        self.meta.read_entry(dev, &entry, &mut self.io_log)
    }

    /// Replaces a file's content in place, growing or shrinking its chain.
    pub fn overwrite<D: SectorWrite + ?Sized>(
        &mut self,
        dev: &mut D,
        name: &str,
        bytes: &[u8],
        timestamp: u64,
    ) -> Result<DirEntry, FsError> {
        let idx = self
            .meta
            .find(name)
            .ok_or_else(|| FsError::NotFound(name.to_owned()))?;
        let policy = self.default_policy;
        self.transact(dev, |fs, dev| {
            let mut entry = fs.meta.slots[idx].clone().expect("found above");
            let mut chain = fs.meta.table.chain(entry.first_cluster)?;
            let want = fs.clusters_for(bytes.len() as u64) as usize;
            if want > chain.len() {
                let extra = fs.allocate((want - chain.len()) as u64, policy)?;
                chain.extend(extra);
            } else {
                for &c in &chain[want..] {
                    fs.set_entry(c, ClusterEntry::Free);
                }
                chain.truncate(want);
            }
            fs.link(&chain);
            fs.write_chain(dev, &chain, bytes)?;
            entry.first_cluster = chain.first().copied();
            entry.size = bytes.len() as u64;
            entry.modified = timestamp;
            entry.generation += 1;
            fs.set_slot(idx, Some(entry.clone()));
            Ok(entry)
        })
    }

    pub fn rename<D: SectorWrite + ?Sized>(&mut self, dev: &mut D, old: &str, new: &str) -> Result<(), FsError> {
        validate_name(new)?;
        let idx = self.meta.find(old).ok_or_else(|| FsError::NotFound(old.to_owned()))?;
        if old == new {
            return Ok(());
        }
        if self.meta.find(new).is_some() {
            return Err(FsError::Exists(new.to_owned()));
        }
        self.transact(dev, |fs, _| {
            let mut e = fs.meta.slots[idx].clone().expect("found above");
            e.name = new.to_owned();
            fs.set_slot(idx, Some(e));
            Ok(())
        })
    }

    pub fn set_hidden<D: SectorWrite + ?Sized>(&mut self, dev: &mut D, name: &str, hidden: bool) -> Result<(), FsError> {
        let idx = self.meta.find(name).ok_or_else(|| FsError::NotFound(name.to_owned()))?;
        self.transact(dev, |fs, _| {
            let mut e = fs.meta.slots[idx].clone().expect("found above");
            e.hidden = hidden;
            fs.set_slot(idx, Some(e));
            Ok(())
        })
    }

    /// Frees the chain and flags the entry deleted. Data sectors are left
    /// as they are.
    pub fn delete<D: SectorWrite + ?Sized>(&mut self, dev: &mut D, name: &str) -> Result<DirEntry, FsError> {
        let idx = self.meta.find(name).ok_or_else(|| FsError::NotFound(name.to_owned()))?;
        self.transact(dev, |fs, _| {
            let mut e = fs.meta.slots[idx].clone().expect("found above");
            for c in fs.meta.table.chain(e.first_cluster)? {
                fs.set_entry(c, ClusterEntry::Free);
            }
            e.deleted = true;
            fs.set_slot(idx, Some(e.clone()));
            Ok(e)
        })
    }

    /// Writes dirty metadata, coalescing adjacent sectors into one request.
    fn flush<D: SectorWrite + ?Sized>(&mut self, dev: &mut D) -> Result<(), FsError> {
        let base = self.meta.region.base_lba;
        let lay = self.meta.layout;

        let table_runs = coalesce(&std::mem::take(&mut self.dirty_table));
        for (first, n) in table_runs {
            let mut buf = vec![0u8; n as usize * SECTOR_SIZE];
            let lo = first as usize * SECTOR_SIZE / 4;
            let hi = (lo + buf.len() / 4).min(self.meta.table.entries.len());
            for (word, e) in buf.chunks_exact_mut(4).zip(&self.meta.table.entries[lo..hi]) {
                word.copy_from_slice(&layout::encode_entry(*e).to_le_bytes());
            }
            for (lba, cnt) in request_spans(base + lay.table_start + first, n) {
                let off = (lba - (base + lay.table_start + first)) as usize * SECTOR_SIZE;
                dev.write_sectors(lba, &buf[off..off + cnt as usize * SECTOR_SIZE])?;
                self.io_log.push(IoRequest { write: true, lba, sectors: cnt });
            }
        }

        let slots: BTreeSet<u64> = std::mem::take(&mut self.dirty_slots).into_iter().map(u64::from).collect();
        for (first, n) in coalesce(&slots) {
            let mut buf = Vec::with_capacity(n as usize * SECTOR_SIZE);
            for i in first..first + n {
                buf.extend(layout::encode_slot(self.meta.slots[i as usize].as_ref()));
            }
            for (lba, cnt) in request_spans(base + lay.dir_start + first, n) {
                let off = (lba - (base + lay.dir_start + first)) as usize * SECTOR_SIZE;
                dev.write_sectors(lba, &buf[off..off + cnt as usize * SECTOR_SIZE])?;
                self.io_log.push(IoRequest { write: true, lba, sectors: cnt });
            }
        }

        if std::mem::take(&mut self.super_dirty) {
            let sb = layout::encode_superblock(&Superblock {
                cluster_size: lay.cluster_size,
                num_clusters: lay.num_clusters,
                dir_slots: lay.dir_slots,
                alloc_cursor: self.meta.table.alloc_cursor,
                probe_counter: self.probe_counter,
            });
            dev.write_sectors(base, &sb)?;
            self.io_log.push(IoRequest { write: true, lba: base, sectors: 1 });
        }
        Ok(())
    }
}

fn coalesce(set: &BTreeSet<u64>) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for &s in set {
        match out.last_mut() {
            Some((start, n)) if *start + *n == s => *n += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}
