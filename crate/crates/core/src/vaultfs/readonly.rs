use crate::block::SectorRead;

use super::{format_listing, DirEntry, FsError, Meta, Region};

/// A read-only mount. It borrows the device immutably and only ever issues
/// reads, so no write can be expressed through it.
#[derive(Debug)]
pub struct ReadOnlyFs<'a, D: SectorRead + ?Sized> {
    dev: &'a D,
    meta: Meta,
}

impl<'a, D: SectorRead + ?Sized> ReadOnlyFs<'a, D> {
    pub fn mount(dev: &'a D, region: Region) -> Result<Self, FsError> {
        let meta = Meta::load(dev, region, &mut Vec::new())?;
        Ok(Self { dev, meta })
    }

    pub fn list(&self, show_hidden: bool) -> Vec<DirEntry> {
        self.meta.list(show_hidden)
    }

    pub fn lookup(&self, name: &str) -> Option<&DirEntry> {
        self.meta.find(name).and_then(|i| self.meta.slots[i].as_ref())
    }

    pub fn read_file(&self, name: &str) -> Result<Vec<u8>, FsError> {
        let entry = self.meta.entry(name)?;
        self.meta.read_entry(self.dev, entry, &mut Vec::new())
    }

    pub fn debug_listing(&self, show_hidden: bool) -> String {
        format_listing(&self.list(show_hidden))
    }
}
