//! Text-mode multi-select file browser used for consented deletion.

use std::collections::BTreeSet;

use crate::tee::{Key, UiChannel};
use crate::vaultfs::DirEntry;

pub const SELECTED_MARK: char = '»';

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrowseResult {
    Confirmed(Vec<String>),
    Aborted,
}

/// Cursor, selection and pending group anchor over a fixed listing.
#[derive(Debug, Clone)]
pub struct Browser {
    entries: Vec<DirEntry>,
    cursor: usize,
    selected: BTreeSet<usize>,
    anchor: Option<usize>,
}

impl Browser {
    pub fn new(entries: Vec<DirEntry>) -> Self {
        Self {
            entries,
            cursor: 0,
            selected: BTreeSet::new(),
            anchor: None,
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn selected_names(&self) -> Vec<String> {
        self.selected.iter().map(|&i| self.entries[i].name.clone()).collect()
    }

    pub fn render(&self) -> Vec<String> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let cur = if i == self.cursor { '>' } else { ' ' };
                let mark = if self.selected.contains(&i) { SELECTED_MARK } else { ' ' };
                let flag = if e.hidden { "H" } else { "-" };
                format!("{cur}{mark} {}\t{}\t{}\t{flag}", e.name, e.size, e.modified)
            })
            .collect()
    }

    /// Applies a navigation or selection key. Returns false for keys that end
    /// the browsing phase (Enter, Quit).
    pub fn apply(&mut self, key: Key) -> bool {
        let last = self.entries.len().saturating_sub(1);
        match key {
            Key::Up => self.cursor = self.cursor.saturating_sub(1),
            Key::Down => self.cursor = (self.cursor + 1).min(last),
            Key::Toggle if !self.entries.is_empty() => {
                if !self.selected.remove(&self.cursor) {
                    self.selected.insert(self.cursor);
                }
            }
            // First press marks the first file, second press the last one;
            // everything between is selected.
            Key::Group if !self.entries.is_empty() => match self.anchor.take() {
                None => self.anchor = Some(self.cursor),
                Some(a) => {
                    let (lo, hi) = (a.min(self.cursor), a.max(self.cursor));
                    self.selected.extend(lo..=hi);
                }
            },
            Key::Enter | Key::Quit => return false,
            _ => {}
        }
        true
    }

    /// Runs the interactive loop to completion on `ui`.
    pub fn run(mut self, ui: &mut dyn UiChannel) -> BrowseResult {
        ui.emit("select files to delete: j/k move, space toggle, g group, enter finish, q quit");
        for line in self.render() {
            ui.emit(&line);
        }
        loop {
            let Some(key) = ui.next_key() else {
                return BrowseResult::Aborted;
            };
            if key == Key::Quit {
                return BrowseResult::Aborted;
            }
            if !self.apply(key) {
                break;
            }
            if matches!(key, Key::Toggle | Key::Group) {
                for line in self.render() {
                    ui.emit(&line);
                }
            }
        }
        let names = self.selected_names();
        if names.is_empty() {
            ui.emit("nothing selected");
            return BrowseResult::Aborted;
        }
        ui.emit(&format!("delete {} file(s)? [y/n]", names.len()));
        for n in &names {
            ui.emit(&format!("  {SELECTED_MARK} {n}"));
        }
        match ui.next_key() {
            Some(Key::Yes) => BrowseResult::Confirmed(names),
            _ => BrowseResult::Aborted,
        }
    }
}
