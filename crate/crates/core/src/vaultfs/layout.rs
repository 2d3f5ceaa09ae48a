//! On-disk encoding of the vault filesystem.
//!
//! ```text
//! region sector 0        superblock
//! table_start..          cluster table, 4 bytes per cluster (LE)
//! dir_start..            one 512-byte directory slot per sector
//! data_start..           cluster data
//! ```
//!
//! Table words: `0` is free, `u32::MAX` ends a chain, anything else is the
//! next cluster index plus one.

use crate::block::SECTOR_SIZE;

use super::{ClusterEntry, DirEntry, FsError};

pub(super) const MAGIC: &[u8; 8] = b"SVAULTFS";
pub(super) const VERSION: u32 = 1;
pub const MAX_NAME_LEN: usize = 255;

const SLOT_UNUSED: u8 = 0;
const SLOT_LIVE: u8 = 1;
const SLOT_DELETED: u8 = 2;
const NO_CLUSTER: u32 = u32::MAX;

/// Sector geometry of a formatted image, relative to the region start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsLayout {
    pub cluster_size: u32,
    pub num_clusters: u32,
    pub dir_slots: u32,
    pub table_start: u64,
    pub table_sectors: u64,
    pub dir_start: u64,
    pub data_start: u64,
}

impl FsLayout {
    pub fn new(num_clusters: u32, cluster_size: u32, dir_slots: u32) -> Result<Self, FsError> {
        if num_clusters == 0 || num_clusters == u32::MAX {
            return Err(FsError::BadGeometry(format!("{num_clusters} clusters")));
        }
        if cluster_size == 0 || cluster_size as usize % SECTOR_SIZE != 0 {
            return Err(FsError::BadGeometry(format!(
                "cluster size {cluster_size} is not a positive multiple of {SECTOR_SIZE}"
            )));
        }
        if dir_slots == 0 {
            return Err(FsError::BadGeometry("no directory slots".into()));
        }
        let table_sectors = (num_clusters as u64 * 4).div_ceil(SECTOR_SIZE as u64);
        let table_start = 1;
        let dir_start = table_start + table_sectors;
        let data_start = dir_start + dir_slots as u64;
        Ok(Self {
            cluster_size,
            num_clusters,
            dir_slots,
            table_start,
            table_sectors,
            dir_start,
            data_start,
        })
    }

    pub fn sectors_per_cluster(&self) -> u64 {
        self.cluster_size as u64 / SECTOR_SIZE as u64
    }

    /// Sectors the whole image occupies.
    pub fn total_sectors(&self) -> u64 {
        self.data_start + self.num_clusters as u64 * self.sectors_per_cluster()
    }

    pub fn cluster_sector(&self, cluster: u32) -> u64 {
        self.data_start + cluster as u64 * self.sectors_per_cluster()
    }
}

pub(super) struct Superblock {
    pub cluster_size: u32,
    pub num_clusters: u32,
    pub dir_slots: u32,
    pub alloc_cursor: u32,
    pub probe_counter: u64,
}

pub(super) fn encode_superblock(sb: &Superblock) -> Vec<u8> {
    let mut s = vec![0u8; SECTOR_SIZE];
    s[0..8].copy_from_slice(MAGIC);
    s[8..12].copy_from_slice(&VERSION.to_le_bytes());
    s[12..16].copy_from_slice(&sb.cluster_size.to_le_bytes());
    s[16..20].copy_from_slice(&sb.num_clusters.to_le_bytes());
    s[20..24].copy_from_slice(&sb.dir_slots.to_le_bytes());
    s[24..28].copy_from_slice(&sb.alloc_cursor.to_le_bytes());
    s[28..36].copy_from_slice(&sb.probe_counter.to_le_bytes());
    s
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

pub(super) fn decode_superblock(s: &[u8]) -> Result<Superblock, FsError> {
    if &s[0..8] != MAGIC {
        return Err(FsError::NotFormatted);
    }
    let version = le_u32(&s[8..]);
    if version != VERSION {
        return Err(FsError::Corrupt(format!("unsupported version {version}")));
    }
    Ok(Superblock {
        cluster_size: le_u32(&s[12..]),
        num_clusters: le_u32(&s[16..]),
        dir_slots: le_u32(&s[20..]),
        alloc_cursor: le_u32(&s[24..]),
        probe_counter: le_u64(&s[28..]),
    })
}

pub(super) fn encode_entry(e: ClusterEntry) -> u32 {
    match e {
        ClusterEntry::Free => 0,
        ClusterEntry::EndOfChain => u32::MAX,
        ClusterEntry::Next(n) => n + 1,
    }
}

pub(super) fn decode_entry(word: u32, num_clusters: u32) -> Result<ClusterEntry, FsError> {
    match word {
        0 => Ok(ClusterEntry::Free),
        u32::MAX => Ok(ClusterEntry::EndOfChain),
        w if w - 1 < num_clusters => Ok(ClusterEntry::Next(w - 1)),
        w => Err(FsError::Corrupt(format!("table link {w} out of range"))),
    }
}

pub(super) fn encode_slot(slot: Option<&DirEntry>) -> Vec<u8> {
    let mut s = vec![0u8; SECTOR_SIZE];
    let Some(e) = slot else {
        return s;
    };
    s[0] = if e.deleted { SLOT_DELETED } else { SLOT_LIVE };
    s[1] = e.hidden as u8;
    let name = e.name.as_bytes();
    s[2..4].copy_from_slice(&(name.len() as u16).to_le_bytes());
    s[4..12].copy_from_slice(&e.size.to_le_bytes());
    s[12..20].copy_from_slice(&e.created.to_le_bytes());
    s[20..28].copy_from_slice(&e.modified.to_le_bytes());
    s[28..32].copy_from_slice(&e.first_cluster.unwrap_or(NO_CLUSTER).to_le_bytes());
    s[32..40].copy_from_slice(&e.generation.to_le_bytes());
    s[40..40 + name.len()].copy_from_slice(name);
    s
}

pub(super) fn decode_slot(s: &[u8]) -> Result<Option<DirEntry>, FsError> {
    let deleted = match s[0] {
        SLOT_UNUSED => return Ok(None),
        SLOT_LIVE => false,
        SLOT_DELETED => true,
        other => return Err(FsError::Corrupt(format!("slot state {other}"))),
    };
    let name_len = u16::from_le_bytes([s[2], s[3]]) as usize;
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(FsError::Corrupt(format!("name length {name_len}")));
    }
    let name = std::str::from_utf8(&s[40..40 + name_len])
        .map_err(|_| FsError::Corrupt("name is not UTF-8".into()))?
        .to_owned();
    let first = le_u32(&s[28..]);
    Ok(Some(DirEntry {
        name,
        size: le_u64(&s[4..]),
        created: le_u64(&s[12..]),
        modified: le_u64(&s[20..]),
        first_cluster: (first != NO_CLUSTER).then_some(first),
        hidden: s[1] & 1 == 1,
        deleted,
        generation: le_u64(&s[32..]),
    }))
}
