//! Sector-addressed storage primitives shared by the drive model and the
//! filesystem.
//!
//! [`SectorStore`] is a sparse in-memory medium: sectors are grouped into
//! fixed-size chunks that are only materialized once written, so a multi-GB
//! device costs memory proportional to the bytes actually stored.

use std::sync::OnceLock;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Bytes per sector. Fixed for every device in the simulation.
pub const SECTOR_SIZE: usize = 512;

const CHUNK_SECTORS: u64 = 128;
const CHUNK_BYTES: usize = CHUNK_SECTORS as usize * SECTOR_SIZE;

/// A 32-byte SHA-256 value.
pub type Digest = [u8; 32];

/// Errors raised by sector-level I/O.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("sector range {lba}+{count} exceeds device of {sector_count} sectors")]
    OutOfBounds {
        lba: u64,
        count: u64,
        sector_count: u64,
    },
    #[error("buffer of {0} bytes is not a whole number of sectors")]
    Misaligned(usize),
    #[error("write rejected: locking range {0} is write-locked")]
    WriteLocked(u32),
    #[error("read rejected: locking range {0} is read-locked")]
    ReadLocked(u32),
}

/// Read access to a sector-addressed device. Reads never mutate the device.
pub trait SectorRead {
    fn sector_count(&self) -> u64;
    fn read_sectors(&self, lba: u64, count: u64) -> Result<Vec<u8>, BlockError>;
}

/// Write access to a sector-addressed device.
pub trait SectorWrite: SectorRead {
    fn write_sectors(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError>;
}

impl<T: SectorRead + ?Sized> SectorRead for &T {
    fn sector_count(&self) -> u64 {
        (**self).sector_count()
    }
    fn read_sectors(&self, lba: u64, count: u64) -> Result<Vec<u8>, BlockError> {
        (**self).read_sectors(lba, count)
    }
}

impl<T: SectorRead + ?Sized> SectorRead for &mut T {
    fn sector_count(&self) -> u64 {
        (**self).sector_count()
    }
    fn read_sectors(&self, lba: u64, count: u64) -> Result<Vec<u8>, BlockError> {
        (**self).read_sectors(lba, count)
    }
}

impl<T: SectorWrite + ?Sized> SectorWrite for &mut T {
    fn write_sectors(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        (**self).write_sectors(lba, data)
    }
}

/// Sparse sector medium with no access control.
#[derive(Clone)]
pub struct SectorStore {
    sector_count: u64,
    chunks: Vec<Option<Box<[u8]>>>,
}

impl std::fmt::Debug for SectorStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SectorStore")
            .field("sector_count", &self.sector_count)
            .field("materialized_chunks", &self.chunks.iter().flatten().count())
            .finish()
    }
}

fn zero_hash(len: usize) -> Digest {
    static FULL_CHUNK: OnceLock<Digest> = OnceLock::new();
    if len == CHUNK_BYTES {
        return *FULL_CHUNK.get_or_init(|| Sha256::digest(vec![0u8; CHUNK_BYTES]).into());
    }
    Sha256::digest(vec![0u8; len]).into()
}

impl SectorStore {
    pub fn new(sector_count: u64) -> Self {
        let n_chunks = sector_count.div_ceil(CHUNK_SECTORS) as usize;
        Self {
            sector_count,
            chunks: vec![None; n_chunks],
        }
    }

    pub fn sector_count(&self) -> u64 {
        self.sector_count
    }

    pub fn check_bounds(&self, lba: u64, count: u64) -> Result<(), BlockError> {
        match lba.checked_add(count) {
            Some(end) if end <= self.sector_count => Ok(()),
            _ => Err(BlockError::OutOfBounds {
                lba,
                count,
                sector_count: self.sector_count,
            }),
        }
    }

    fn chunk_len(&self, idx: usize) -> usize {
        let first = idx as u64 * CHUNK_SECTORS;
        let sectors = (self.sector_count - first).min(CHUNK_SECTORS);
        sectors as usize * SECTOR_SIZE
    }

    /// Reads without bounds checks beyond those of the slice arithmetic.
    fn copy_out(&self, lba: u64, out: &mut [u8]) {
        let mut offset = lba as usize * SECTOR_SIZE;
        let mut done = 0;
        while done < out.len() {
            let idx = offset / CHUNK_BYTES;
            let within = offset % CHUNK_BYTES;
            let take = (CHUNK_BYTES - within).min(out.len() - done);
            match &self.chunks[idx] {
                Some(chunk) => out[done..done + take].copy_from_slice(&chunk[within..within + take]),
                None => out[done..done + take].fill(0),
            }
            done += take;
            offset += take;
        }
    }

    fn copy_in(&mut self, lba: u64, data: &[u8]) {
        let mut offset = lba as usize * SECTOR_SIZE;
        let mut done = 0;
        while done < data.len() {
            let idx = offset / CHUNK_BYTES;
            let within = offset % CHUNK_BYTES;
            let take = (CHUNK_BYTES - within).min(data.len() - done);
            let piece = &data[done..done + take];
            if self.chunks[idx].is_none() && piece.iter().all(|&b| b == 0) {
                // Writing zeros into an absent chunk is a no-op.
            } else {
                let len = self.chunk_len(idx);
                let chunk = self.chunks[idx].get_or_insert_with(|| vec![0u8; len].into_boxed_slice());
                chunk[within..within + take].copy_from_slice(piece);
            }
            done += take;
            offset += take;
        }
    }

    /// Content digest over `count` sectors starting at `lba`.
    ///
    /// The digest is a function of logical content only: it hashes the
    /// per-chunk digests of the chunk-aligned pieces of the range, so
    /// unmaterialized chunks and zero-filled ones hash identically.
    pub fn range_digest(&self, lba: u64, count: u64) -> Result<Digest, BlockError> {
        self.check_bounds(lba, count)?;
        let mut outer = Sha256::new();
        outer.update(lba.to_be_bytes());
        outer.update(count.to_be_bytes());
        let mut sector = lba;
        let end = lba + count;
        while sector < end {
            let idx = (sector / CHUNK_SECTORS) as usize;
            let chunk_end = ((idx as u64 + 1) * CHUNK_SECTORS).min(end);
            let n = chunk_end - sector;
            let bytes = n as usize * SECTOR_SIZE;
            let piece: Digest = match &self.chunks[idx] {
                None => zero_hash(bytes),
                Some(chunk) => {
                    let within = (sector % CHUNK_SECTORS) as usize * SECTOR_SIZE;
                    Sha256::digest(&chunk[within..within + bytes]).into()
                }
            };
            outer.update(piece);
            sector = chunk_end;
        }
        Ok(outer.finalize().into())
    }

    /// Digest of the entire medium.
    pub fn digest(&self) -> Digest {
        self.range_digest(0, self.sector_count)
            .expect("whole-device range is always in bounds")
    }

    /// Materialized chunks as `(first_lba, bytes)`; absent chunks are all zero.
    pub fn materialized(&self) -> impl Iterator<Item = (u64, &[u8])> + '_ {
        self.chunks
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_deref().map(|c| (i as u64 * CHUNK_SECTORS, c)))
    }

    /// Writes the full medium as a raw flat image.
    pub fn write_raw<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut zero = Vec::new();
        for (idx, chunk) in self.chunks.iter().enumerate() {
            match chunk {
                Some(c) => out.write_all(c)?,
                None => {
                    zero.resize(self.chunk_len(idx), 0);
                    out.write_all(&zero)?;
                }
            }
        }
        Ok(())
    }

    /// Loads a raw flat image; its length must be a whole number of sectors.
    pub fn read_raw<R: std::io::Read>(mut input: R) -> std::io::Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() % SECTOR_SIZE != 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("image length {} is not a multiple of {SECTOR_SIZE}", bytes.len()),
            ));
        }
        let mut store = Self::new((bytes.len() / SECTOR_SIZE) as u64);
        store.copy_in(0, &bytes);
        Ok(store)
    }

    /// Resets every sector to zero.
    pub fn zero_all(&mut self) {
        self.chunks.iter_mut().for_each(|c| *c = None);
    }
}

impl SectorRead for SectorStore {
    fn sector_count(&self) -> u64 {
        self.sector_count
    }

    fn read_sectors(&self, lba: u64, count: u64) -> Result<Vec<u8>, BlockError> {
        self.check_bounds(lba, count)?;
        let mut out = vec![0u8; count as usize * SECTOR_SIZE];
        self.copy_out(lba, &mut out);
        Ok(out)
    }
}

impl SectorWrite for SectorStore {
    fn write_sectors(&mut self, lba: u64, data: &[u8]) -> Result<(), BlockError> {
        if data.len() % SECTOR_SIZE != 0 {
            return Err(BlockError::Misaligned(data.len()));
        }
        self.check_bounds(lba, (data.len() / SECTOR_SIZE) as u64)?;
        self.copy_in(lba, data);
        Ok(())
    }
}
