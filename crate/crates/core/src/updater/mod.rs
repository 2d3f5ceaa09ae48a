//! The trusted updater: the only program that ever unlocks the protected
//! range.
//!
//! Everything here runs inside a late-launch session. The SED credential and
//! the policy live in a [`SealedState`] that only unseals under the genuine
//! measurement. Commits are append-only: a changed original becomes a new
//! live entry and the previous content is kept as a hidden version named
//! `base.<12-digit timestamp>`.

pub mod browser;
pub mod policy;
pub mod report;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::SectorWrite;
use crate::sed::{Credential, SedError};
use crate::tee::{ProgramImage, SessionContext, TeeProgram};
use crate::timeauth::{self, AuthorityKey, TimeError, TimeToken};
use crate::tpm::{SealedBlob, TpmError, LAUNCH_PCR};
use crate::vaultfs::{AllocPolicy, FsError, FsImage, ReadOnlyFs, Region};

use browser::{BrowseResult, Browser};
pub use policy::{verify_policy, PolicyCheck, PolicyError, UpdatePolicy};
pub use report::{Anomaly, Committed, Deletion, DeletionCause, RunKind, Skipped, TimeStatus, UpdateReport};

/// NVRAM index holding the sealed updater state.
pub const SEALED_STATE_INDEX: u32 = 0x1500;

/// Name of the plaintext policy copy on the original partition.
pub const POLICY_FILE_NAME: &str = "sealvault.policy";

/// Runs remembered for cross-run anomaly detection.
pub const ANOMALY_WINDOW: usize = 10;

/// Bytes measured for the genuine updater.
pub const UPDATER_IMAGE_BYTES: &[u8] = b"sealvault trusted updater\nbehavior-version=1\n\
commit=append-only;versions=hidden-timestamped;autodelete=aging+version-limit\n";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UpdaterError {
    #[error("cannot unseal updater state: {0}")]
    UnsealFailed(String),
    #[error("protected range is already provisioned")]
    AlreadyProvisioned,
    #[error("not enough space: need {needed} clusters, {free} free")]
    NoSpace { needed: u64, free: u64 },
    #[error("aborted by user, nothing deleted")]
    Aborted,
    #[error(transparent)]
    Time(#[from] TimeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error(transparent)]
    Sed(#[from] SedError),
    #[error(transparent)]
    Tpm(#[from] TpmError),
}

/// Geometry of the protected file system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsGeometry {
    pub num_clusters: u32,
    pub cluster_size: u32,
    pub dir_slots: u32,
}

/// Secrets and bookkeeping only the genuine updater can read.
#[derive(Clone, Serialize, Deserialize)]
pub struct SealedState {
    pub sed_credential: Credential,
    pub range_id: u32,
    pub protected: Region,
    pub original: Region,
    pub policy: UpdatePolicy,
    pub last_commit_time: Option<u64>,
    pub last_accepted_ntp: Option<u64>,
    pub ntp_public_key: AuthorityKey,
    /// Original-side generation counter of each file at its last commit.
    pub committed_generations: BTreeMap<String, u64>,
    /// Per-file version counts of the most recent runs, newest last.
    pub recent_runs: VecDeque<BTreeMap<String, u64>>,
    /// Originals skipped earlier (oversize or no space); retried every run.
    #[serde(default)]
    pub pending: BTreeSet<String>,
}

impl std::fmt::Debug for SealedState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SealedState")
            .field("range_id", &self.range_id)
            .field("protected", &self.protected)
            .field("last_commit_time", &self.last_commit_time)
            .field("last_accepted_ntp", &self.last_accepted_ntp)
            .finish_non_exhaustive()
    }
}

impl SealedState {
    pub fn from_json(bytes: &[u8]) -> Result<Self, String> {
        serde_json::from_slice(bytes).map_err(|e| e.to_string())
    }
}

/// Hidden version name for `base` committed at `timestamp`.
pub fn version_name(base: &str, timestamp: u64, seq: u32) -> String {
    if seq == 0 {
        format!("{base}.{timestamp:012}")
    } else {
        format!("{base}.{timestamp:012}-{seq}")
    }
}

/// Inverse of [`version_name`]: `(base, timestamp, seq)`.
pub fn parse_version_name(name: &str) -> Option<(&str, u64, u32)> {
    let (base, suffix) = name.rsplit_once('.')?;
    let (ts, seq) = match suffix.split_once('-') {
        Some((ts, seq)) => (ts, seq.parse().ok().filter(|s| *s > 0)?),
        None => (suffix, 0),
    };
    if base.is_empty() || ts.len() != 12 || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((base, ts.parse().ok()?, seq))
}

#[derive(Debug, Clone)]
pub struct ProvisionArgs {
    pub policy: UpdatePolicy,
    pub ntp_key: AuthorityKey,
    pub original: Region,
    pub protected: Region,
    pub geometry: FsGeometry,
}

#[derive(Debug, Clone)]
pub enum UpdaterTask {
    Provision(ProvisionArgs),
    Commit { token: Option<TimeToken> },
    BrowseDelete,
    AutoDelete { token: Option<TimeToken> },
}

/// The updater program. Its behavior is fixed; what it is allowed to reach
/// depends only on the measurement of the image it is launched from.
#[derive(Debug, Clone)]
pub struct Updater {
    pub task: UpdaterTask,
}

pub fn genuine_image(task: UpdaterTask) -> ProgramImage<Updater> {
    ProgramImage::new("trusted-updater", UPDATER_IMAGE_BYTES.to_vec(), Updater { task })
}

impl TeeProgram for Updater {
    type Output = UpdateReport;
    type Error = UpdaterError;

    fn run(&mut self, ctx: &mut SessionContext<'_>) -> Result<UpdateReport, UpdaterError> {
        let result = match &self.task {
            UpdaterTask::Provision(args) => provision(ctx, args),
            UpdaterTask::Commit { token } => commit(ctx, token.as_ref()),
            UpdaterTask::BrowseDelete => browse_delete(ctx),
            UpdaterTask::AutoDelete { token } => auto_delete(ctx, token.as_ref()),
        };
        match &result {
            Ok(report) => {
                for line in report.to_lines(false) {
                    ctx.ui.emit(&line);
                }
                for line in report.to_lines(true) {
                    ctx.note(line);
                }
            }
            Err(e) => ctx.ui.emit(&format!("updater error: {e}")),
        }
        result
    }
}

/// Shows the avatar. Must be the first output of every session that
/// unsealed successfully.
pub fn render_banner(ctx: &mut SessionContext<'_>, avatar: &str) -> String {
    ctx.ui.emit(&banner_line(avatar));
    avatar.to_owned()
}

pub fn banner_line(avatar: &str) -> String {
    format!("== {avatar} ==")
}

fn load_state(ctx: &SessionContext<'_>) -> Result<SealedState, UpdaterError> {
    let fail = |e: String| UpdaterError::UnsealFailed(e);
    let raw = ctx.tpm.nvram_read(SEALED_STATE_INDEX).map_err(|e| fail(e.to_string()))?;
    let blob = SealedBlob::from_bytes(&raw).map_err(|e| fail(e.to_string()))?;
    let plain = ctx.tpm.unseal(&blob).map_err(|e| fail(e.to_string()))?;
    SealedState::from_json(&plain).map_err(fail)
}

fn store_state(ctx: &mut SessionContext<'_>, state: &SealedState) -> Result<(), UpdaterError> {
    let bindings = ctx.tpm.bind_current(&[LAUNCH_PCR])?;
    let json = serde_json::to_vec(state).expect("sealed state serializes");
    let blob = ctx.tpm.seal(&json, &bindings)?;
    ctx.tpm.nvram_write(SEALED_STATE_INDEX, &blob.to_bytes())?;
    Ok(())
}

fn read_plaintext_policy(ctx: &SessionContext<'_>, original: Region) -> Option<String> {
    let fs = ReadOnlyFs::mount(&*ctx.sed, original).ok()?;
    let bytes = fs.read_file(POLICY_FILE_NAME).ok()?;
    String::from_utf8(bytes).ok()
}

fn provision(ctx: &mut SessionContext<'_>, args: &ProvisionArgs) -> Result<UpdateReport, UpdaterError> {
    if ctx.tpm.nvram_is_defined(SEALED_STATE_INDEX) || !ctx.sed.ranges().is_empty() {
        return Err(UpdaterError::AlreadyProvisioned);
    }
    args.policy.validate()?;
    let now = ctx.now;
    let avatar = render_banner(ctx, &args.policy.avatar);
    let mut report = UpdateReport::new(RunKind::Provision, now, &avatar);

    // Everything that can fail for lack of room is checked before the
    // device is touched.
    let g = args.geometry;
    let layout = crate::vaultfs::FsLayout::new(g.num_clusters, g.cluster_size, g.dir_slots)?;
    if layout.total_sectors() > args.protected.sectors {
        return Err(FsError::TooSmall {
            needed: layout.total_sectors(),
            available: args.protected.sectors,
        }
        .into());
    }
    let needed: u64 = {
        let orig = ReadOnlyFs::mount(&*ctx.sed, args.original)?;
        orig.list(true)
            .iter()
            .filter(|e| e.name != POLICY_FILE_NAME && e.size <= args.policy.max_file_size)
            .map(|e| e.size.div_ceil(g.cluster_size as u64))
            .sum()
    };
    if needed > g.num_clusters as u64 {
        return Err(UpdaterError::NoSpace {
            needed,
            free: g.num_clusters as u64,
        });
    }

    let credential = Credential::random(&mut *ctx.rng);
    let msid = ctx.sed.msid().clone();
    let range_id = ctx
        .sed
        .configure_range(&msid, args.protected.base_lba, args.protected.sectors, true, false, &credential)
        .map_err(|e| match e {
            SedError::BadCredential | SedError::OverlappingRange(_) => UpdaterError::AlreadyProvisioned,
            e => e.into(),
        })?;
    ctx.sed.change_admin(&msid, &credential)?;
    ctx.sed.unlock_write(range_id, &credential)?;

    let mut prot = FsImage::format_with(&mut *ctx.sed, args.protected, g.num_clusters, g.cluster_size, g.dir_slots)?;
    let mut orig = FsImage::mount(&*ctx.sed, args.original)?;
    let text = args.policy.to_plaintext();
    if orig.lookup(POLICY_FILE_NAME).is_some() {
        orig.overwrite(&mut *ctx.sed, POLICY_FILE_NAME, text.as_bytes(), now)?;
    } else {
        orig.create_write(&mut *ctx.sed, POLICY_FILE_NAME, text.as_bytes(), now, AllocPolicy::Cursor)?;
    }

    let mut state = SealedState {
        sed_credential: credential.clone(),
        range_id,
        protected: args.protected,
        original: args.original,
        policy: args.policy.clone(),
        last_commit_time: None,
        last_accepted_ntp: None,
        ntp_public_key: args.ntp_key,
        committed_generations: BTreeMap::new(),
        recent_runs: VecDeque::new(),
        pending: BTreeSet::new(),
    };
    report.policy_check = Some(PolicyCheck::Ok);
    commit_files(ctx, &mut state, &mut prot, &mut orig, &mut report)?;
    state.last_commit_time = Some(now);

    let bindings = ctx.tpm.bind_current(&[LAUNCH_PCR])?;
    ctx.tpm.nvram_define(SEALED_STATE_INDEX, bindings)?;
    store_state(ctx, &state)?;
    ctx.sed.lock_write(range_id, &credential)?;
    Ok(report)
}

fn commit(ctx: &mut SessionContext<'_>, token: Option<&TimeToken>) -> Result<UpdateReport, UpdaterError> {
    // Nothing is unlocked before this succeeds.
    let mut state = load_state(ctx)?;
    let now = ctx.now;
    let avatar = render_banner(ctx, &state.policy.avatar);
    let mut report = UpdateReport::new(RunKind::Commit, now, &avatar);
    let plaintext = read_plaintext_policy(ctx, state.original);
    report.policy_check = Some(verify_policy(&state.policy, plaintext.as_deref()));

    // An invalid token suspends all auto-deletion for this run.
    let mut autodelete = true;
    let mut verified_now = None;
    if let Some(t) = token {
        match timeauth::verify(t, &state.ntp_public_key, state.last_accepted_ntp) {
            Ok(v) => {
                state.last_accepted_ntp = Some(v);
                verified_now = Some(v);
                report.time = TimeStatus::Verified(v);
            }
            Err(e) => {
                autodelete = false;
                report.time = TimeStatus::Rejected(e.to_string());
            }
        }
    }

    let cred = state.sed_credential.clone();
    ctx.sed.unlock_write(state.range_id, &cred)?;
    let mut prot = FsImage::mount(&*ctx.sed, state.protected)?;
    let mut orig = FsImage::mount(&*ctx.sed, state.original)?;
    commit_files(ctx, &mut state, &mut prot, &mut orig, &mut report)?;
    if autodelete {
        report.deletions = apply_auto_delete(ctx, &state.policy, &mut prot, verified_now)?;
    }
    state.last_commit_time = Some(now);
    store_state(ctx, &state)?;
    ctx.sed.lock_write(state.range_id, &cred)?;
    Ok(report)
}

fn browse_delete(ctx: &mut SessionContext<'_>) -> Result<UpdateReport, UpdaterError> {
    let state = load_state(ctx)?;
    let avatar = render_banner(ctx, &state.policy.avatar);
    let mut report = UpdateReport::new(RunKind::BrowseDelete, ctx.now, &avatar);
    let mut prot = FsImage::mount(&*ctx.sed, state.protected)?;
    let names = match Browser::new(prot.list(true)).run(&mut *ctx.ui) {
        BrowseResult::Aborted => return Err(UpdaterError::Aborted),
        BrowseResult::Confirmed(names) => names,
    };
    let cred = state.sed_credential.clone();
    ctx.sed.unlock_write(state.range_id, &cred)?;
    for name in names {
        prot.delete(&mut *ctx.sed, &name)?;
        report.deletions.push(Deletion {
            name,
            cause: DeletionCause::User,
        });
    }
    ctx.sed.lock_write(state.range_id, &cred)?;
    Ok(report)
}

fn auto_delete(ctx: &mut SessionContext<'_>, token: Option<&TimeToken>) -> Result<UpdateReport, UpdaterError> {
    let mut state = load_state(ctx)?;
    let avatar = render_banner(ctx, &state.policy.avatar);
    let mut report = UpdateReport::new(RunKind::AutoDelete, ctx.now, &avatar);
    let verified_now = match token {
        Some(t) => {
            let v = timeauth::verify(t, &state.ntp_public_key, state.last_accepted_ntp)?;
            state.last_accepted_ntp = Some(v);
            report.time = TimeStatus::Verified(v);
            Some(v)
        }
        None => None,
    };
    let cred = state.sed_credential.clone();
    ctx.sed.unlock_write(state.range_id, &cred)?;
    let mut prot = FsImage::mount(&*ctx.sed, state.protected)?;
    report.deletions = apply_auto_delete(ctx, &state.policy, &mut prot, verified_now)?;
    store_state(ctx, &state)?;
    ctx.sed.lock_write(state.range_id, &cred)?;
    Ok(report)
}

/// Copies new or changed originals into the protected image and records
/// anomalies. Expects the protected range to be unlocked.
fn commit_files(
    ctx: &mut SessionContext<'_>,
    state: &mut SealedState,
    prot: &mut FsImage,
    orig: &mut FsImage,
    report: &mut UpdateReport,
) -> Result<(), UpdaterError> {
    let now = ctx.now;
    let mut run_counts = BTreeMap::new();
    let mut out_of_space = false;

    for entry in orig.list(true) {
        if entry.name == POLICY_FILE_NAME {
            continue;
        }
        let changed = state.last_commit_time.is_none_or(|t| entry.modified > t);
        if !changed && !state.pending.contains(&entry.name) {
            continue;
        }
        state.pending.insert(entry.name.clone());
        if entry.size > state.policy.max_file_size {
            report.skipped.push(Skipped {
                name: entry.name.clone(),
                reason: format!("exceeds max_file_size ({} > {})", entry.size, state.policy.max_file_size),
            });
            continue;
        }
        if out_of_space {
            report.skipped.push(Skipped {
                name: entry.name.clone(),
                reason: "no space".into(),
            });
            continue;
        }
        let needed = prot.clusters_for(entry.size);
        if needed > prot.table().free_clusters() {
            out_of_space = true;
            report.skipped.push(Skipped {
                name: entry.name.clone(),
                reason: "no space".into(),
            });
            continue;
        }
        let bytes = orig.read_file(&*ctx.sed, &entry.name)?;
        match store_version(&mut *ctx.sed, prot, &entry.name, &bytes, now) {
            Ok(()) => {}
            Err(FsError::NoSpace { .. } | FsError::DirectoryFull) => {
                out_of_space = true;
                report.skipped.push(Skipped {
                    name: entry.name.clone(),
                    reason: "no space".into(),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        let delta = match state.committed_generations.get(&entry.name) {
            Some(&prev) if entry.generation >= prev => (entry.generation - prev).max(1),
            _ => entry.generation + 1,
        };
        state.pending.remove(&entry.name);
        state.committed_generations.insert(entry.name.clone(), entry.generation);
        run_counts.insert(entry.name.clone(), delta);
        report.committed.push(Committed {
            name: entry.name,
            version_timestamp: now,
            size: entry.size,
        });
    }

    if report.kind == RunKind::Provision {
        // Initial copies are not a burst.
        return Ok(());
    }
    state.recent_runs.push_back(run_counts.clone());
    while state.recent_runs.len() > ANOMALY_WINDOW {
        state.recent_runs.pop_front();
    }
    let threshold = state.policy.anomaly_version_threshold;
    for name in run_counts.keys() {
        let windowed: u64 = state.recent_runs.iter().filter_map(|r| r.get(name)).sum();
        if windowed > threshold {
            report.anomalies.push(Anomaly {
                name: name.clone(),
                versions: windowed,
            });
        }
    }
    Ok(())
}

/// Turns the live entry into a hidden version and writes `bytes` as the new
/// live entry. On failure the previous live entry is restored.
fn store_version<D: SectorWrite + ?Sized>(
    dev: &mut D,
    prot: &mut FsImage,
    name: &str,
    bytes: &[u8],
    now: u64,
) -> Result<(), FsError> {
    let Some(live) = prot.lookup(name).cloned() else {
        prot.create_write(dev, name, bytes, now, AllocPolicy::Cursor)?;
        return Ok(());
    };
    let mut seq = 0;
    let hidden_name = loop {
        let candidate = version_name(name, live.modified, seq);
        if prot.lookup(&candidate).is_none() {
            break candidate;
        }
        seq += 1;
    };
    prot.rename(dev, name, &hidden_name)?;
    prot.set_hidden(dev, &hidden_name, true)?;
    if let Err(e) = prot.create_write(dev, name, bytes, now, AllocPolicy::Cursor) {
        prot.set_hidden(dev, &hidden_name, false)?;
        prot.rename(dev, &hidden_name, name)?;
        return Err(e);
    }
    Ok(())
}

/// Hidden versions that the policy retires, as `(name, cause)`.
///
/// Aging (only with a verified time) and version-limiting are evaluated
/// independently over the same listing and their union is returned. Live
/// entries are never candidates.
pub fn auto_delete_plan(
    policy: &UpdatePolicy,
    entries: &[crate::vaultfs::DirEntry],
    verified_now: Option<u64>,
) -> Vec<Deletion> {
    let live: BTreeSet<&str> = entries.iter().filter(|e| !e.hidden).map(|e| e.name.as_str()).collect();
    let mut versions: BTreeMap<&str, Vec<(u64, u32, &str)>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.hidden) {
        if let Some((base, ts, seq)) = parse_version_name(&e.name) {
            versions.entry(base).or_default().push((ts, seq, e.name.as_str()));
        }
    }
    let mut plan: BTreeMap<&str, DeletionCause> = BTreeMap::new();
    for (base, mut list) in versions {
        list.sort();
        if let (Some(now), true) = (verified_now, policy.aging_enabled()) {
            let cutoff = now.saturating_sub(policy.age_threshold);
            for &(ts, _, name) in &list {
                if ts < cutoff {
                    plan.insert(name, DeletionCause::Aging);
                }
            }
        }
        let total = list.len() + usize::from(live.contains(base));
        let excess = total.saturating_sub(policy.version_limit as usize).min(list.len());
        for &(_, _, name) in &list[..excess] {
            plan.entry(name).or_insert(DeletionCause::VersionLimit);
        }
    }
    plan.into_iter()
        .map(|(name, cause)| Deletion {
            name: name.to_owned(),
            cause,
        })
        .collect()
}

fn apply_auto_delete(
    ctx: &mut SessionContext<'_>,
    policy: &UpdatePolicy,
    prot: &mut FsImage,
    verified_now: Option<u64>,
) -> Result<Vec<Deletion>, UpdaterError> {
    let plan = auto_delete_plan(policy, &prot.list(true), verified_now);
    for d in &plan {
        prot.delete(&mut *ctx.sed, &d.name)?;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests;
