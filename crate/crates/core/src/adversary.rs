//! A rootkit-level attacker and the scoring of what it achieved.
//!
//! Scenarios are data: a JSON document names one of the canned attacks,
//! optionally overrides its parameters or spells out its steps, and states
//! the expected outcome. The engine runs the steps against a provisioned
//! [`World`] using host-level capabilities only, then scores the result from
//! observable state (plus the evaluator's ground truth for secret scanning).

use std::collections::{BTreeMap, BTreeSet};

use memchr::memmem;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

use crate::block::{Digest, SectorWrite, SECTOR_SIZE};
use crate::host::recovery_mount;
use crate::sed::{Credential, SedOp};
use crate::sim::{World, WorldError};
use crate::tee::{Key, ScriptedUi, UiChannel};
use crate::timeauth::{TimeAuthority, TimeToken};
use crate::tpm::{Locality, LAUNCH_PCR};
use crate::updater::{
    banner_line, parse_version_name, DeletionCause, RunKind, TimeStatus, UpdateReport, UpdaterError, UpdaterTask,
    POLICY_FILE_NAME, SEALED_STATE_INDEX, UPDATER_IMAGE_BYTES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    DirectWrite,
    CredentialTheft,
    BinaryTamper,
    ForgedUi,
    DriverKill,
    VersionExhaustion,
    ClockAttack,
    PersistentRansomware,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 8] = [
        ScenarioId::DirectWrite,
        ScenarioId::CredentialTheft,
        ScenarioId::BinaryTamper,
        ScenarioId::ForgedUi,
        ScenarioId::DriverKill,
        ScenarioId::VersionExhaustion,
        ScenarioId::ClockAttack,
        ScenarioId::PersistentRansomware,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::DirectWrite => "direct_write",
            ScenarioId::CredentialTheft => "credential_theft",
            ScenarioId::BinaryTamper => "binary_tamper",
            ScenarioId::ForgedUi => "forged_ui",
            ScenarioId::DriverKill => "driver_kill",
            ScenarioId::VersionExhaustion => "version_exhaustion",
            ScenarioId::ClockAttack => "clock_attack",
            ScenarioId::PersistentRansomware => "persistent_ransomware",
        }
    }
}

/// Optional knobs; unset ones take per-scenario defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    /// Victim files seeded and committed before the attack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_size: Option<u64>,
    /// Raw writes attempted against the protected range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub writes: Option<u32>,
    /// Rewrites per burst; by default the anomaly threshold read from the
    /// plaintext policy plus 20.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    /// Seconds the system clock is rolled forward.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollforward: Option<u64>,
    /// Fraction of protected files committed in one run that raises a
    /// commit-count alert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit_alert_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenSpec {
    #[default]
    None,
    /// Honest authority token for the current time.
    Fresh,
    /// The most recent token the adversary saw.
    ReplayLast,
    /// Signed by a key the adversary made up.
    Forged { offset: u64 },
    /// A genuine token with one bit of its time flipped.
    BitFlipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    /// User activity: new files `prefix0..prefixN` with random content.
    SeedFiles { prefix: String, count: u32, size: u64 },
    /// User edits every file with `prefix`.
    EditFiles { prefix: String },
    Commit {
        #[serde(default)]
        token: TokenSpec,
    },
    /// Marks the pre-attack state used for scoring.
    Checkpoint,
    AdvanceTime { secs: u64 },
    /// Advances time in `every`-second slices, letting the driver fire.
    Ticks { secs: u64, every: u64 },
    RawWriteProtected { count: u32 },
    StealCredential,
    TamperedCommit { offset: usize },
    ForgedUi,
    KillDriver,
    Storm { prefix: String, count: Option<u32> },
    EncryptOriginals { prefix: String },
    DeleteOriginals { prefix: String },
    ClockForward { secs: u64 },
    AutoDelete {
        #[serde(default)]
        token: TokenSpec,
    },
    EditPlaintextPolicy { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub id: ScenarioId,
    #[serde(default)]
    pub parameters: ScenarioParams,
    pub expected_outcome: serde_json::Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<Step>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VersionKey {
    pub base: String,
    pub version: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scenario_id: ScenarioId,
    pub protected_digest_before: String,
    pub protected_digest_after: String,
    pub protected_unchanged: bool,
    pub data_loss: Vec<VersionKey>,
    pub legitimately_deleted: Vec<VersionKey>,
    pub detection_signals: Vec<String>,
    pub pre_attack_versions: usize,
    pub recoverable_versions: usize,
    pub all_pre_attack_recoverable: bool,
    pub versions_added: usize,
    pub protected_writes_attempted: u64,
    pub protected_writes_rejected: u64,
    pub all_protected_writes_rejected: bool,
    pub host_unseal_attempts: u64,
    pub host_unseal_successes: u64,
    pub unlock_after_unseal_failure: bool,
    pub secret_exposed: bool,
    pub exposed_in: Vec<String>,
    pub forged_screen_has_avatar: Option<bool>,
    pub unprotected_originals: Vec<String>,
    pub first_anomaly_round: Option<u32>,
    pub first_history_loss_round: Option<u32>,
    pub anomaly_before_history_loss: bool,
    pub deletions_after_attack: usize,
    pub epilogue_ok: bool,
    pub trace: Vec<String>,
}

impl AttackOutcome {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("outcome serializes")
    }
}

/// Keys whose expected array only needs to be contained in the actual one.
const SUBSET_KEYS: [&str; 1] = ["detection_signals"];

/// Differences between `expected` and `outcome`, one line per key.
pub fn diff_outcome(expected: &serde_json::Map<String, Value>, outcome: &AttackOutcome) -> Vec<String> {
    let actual = outcome.to_json();
    let mut diffs = Vec::new();
    for (key, want) in expected {
        let got = actual.get(key).unwrap_or(&Value::Null);
        let ok = match (SUBSET_KEYS.contains(&key.as_str()), want, got) {
            (true, Value::Array(w), Value::Array(g)) => w.iter().all(|x| g.contains(x)),
            _ => want == got,
        };
        if !ok {
            diffs.push(format!("{key}: expected {want}, got {got}"));
        }
    }
    diffs
}

/// Default parameters and steps of each canned scenario.
pub fn canned_steps(id: ScenarioId, p: &ScenarioParams) -> Vec<Step> {
    let files = p.files.unwrap_or(3);
    let size = p.file_size.unwrap_or(2048);
    let prefix = format!("{}-", id.as_str());
    let seed = |count: u32| Step::SeedFiles {
        prefix: prefix.clone(),
        count,
        size,
    };
    let fresh = || Step::Commit { token: TokenSpec::Fresh };
    let mut steps = vec![
        Step::AdvanceTime { secs: 60 },
        seed(files),
        Step::AdvanceTime { secs: 60 },
        fresh(),
    ];
    match id {
        ScenarioId::DirectWrite => {
            steps.push(Step::Checkpoint);
            steps.push(Step::RawWriteProtected { count: p.writes.unwrap_or(32) });
        }
        ScenarioId::CredentialTheft => {
            steps.push(Step::Checkpoint);
            steps.push(Step::StealCredential);
            steps.push(Step::RawWriteProtected { count: p.writes.unwrap_or(8) });
        }
        ScenarioId::BinaryTamper => {
            steps.push(Step::Checkpoint);
            steps.push(Step::EditFiles { prefix: prefix.clone() });
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(Step::TamperedCommit { offset: 17 });
            steps.push(Step::RawWriteProtected { count: p.writes.unwrap_or(8) });
        }
        ScenarioId::ForgedUi => {
            steps.push(Step::Checkpoint);
            steps.push(Step::ForgedUi);
        }
        ScenarioId::DriverKill => {
            steps.push(Step::Checkpoint);
            steps.push(Step::KillDriver);
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(Step::EditFiles { prefix: prefix.clone() });
            steps.push(Step::Ticks { secs: 48 * 3600, every: 3600 });
        }
        ScenarioId::VersionExhaustion => {
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(Step::EditFiles { prefix: prefix.clone() });
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(fresh());
            steps.push(Step::Checkpoint);
            for _ in 0..p.rounds.unwrap_or(3) {
                steps.push(Step::AdvanceTime { secs: 60 });
                steps.push(Step::Storm {
                    prefix: prefix.clone(),
                    count: p.burst,
                });
                steps.push(Step::AdvanceTime { secs: 60 });
                steps.push(fresh());
            }
        }
        ScenarioId::ClockAttack => {
            for _ in 0..2 {
                steps.push(Step::AdvanceTime { secs: 60 });
                steps.push(Step::EditFiles { prefix: prefix.clone() });
                steps.push(Step::AdvanceTime { secs: 60 });
                steps.push(fresh());
            }
            steps.push(Step::Checkpoint);
            let ahead = p.rollforward.unwrap_or(10 * 365 * 86400);
            steps.push(Step::ClockForward { secs: ahead });
            steps.push(Step::Commit {
                token: TokenSpec::Forged { offset: 0 },
            });
            steps.push(Step::AutoDelete {
                token: TokenSpec::ReplayLast,
            });
            steps.push(Step::AutoDelete {
                token: TokenSpec::BitFlipped,
            });
            steps.push(Step::AutoDelete {
                token: TokenSpec::Forged { offset: 0 },
            });
            steps.push(Step::Commit { token: TokenSpec::None });
        }
        ScenarioId::PersistentRansomware => {
            steps.clear();
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(seed(p.files.unwrap_or(10)));
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(fresh());
            steps.push(Step::Checkpoint);
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(Step::EncryptOriginals { prefix: prefix.clone() });
            steps.push(Step::AdvanceTime { secs: 60 });
            steps.push(fresh());
            steps.push(Step::AdvanceTime { secs: 86400 });
            steps.push(Step::DeleteOriginals { prefix: prefix.clone() });
            steps.push(fresh());
        }
    }
    steps
}

/// The expected outcome shipped with each canned scenario.
pub fn canned_expectation(id: ScenarioId, p: &ScenarioParams) -> serde_json::Map<String, Value> {
    use serde_json::json;
    let base = json!({ "data_loss": [], "epilogue_ok": true, "secret_exposed": false });
    let extra = match id {
        ScenarioId::DirectWrite => json!({
            "protected_unchanged": true,
            "all_protected_writes_rejected": true,
        }),
        ScenarioId::CredentialTheft => json!({
            "host_unseal_successes": 0,
            "protected_unchanged": true,
            "all_protected_writes_rejected": true,
        }),
        ScenarioId::BinaryTamper => json!({
            "detection_signals": ["unseal_failed"],
            "unlock_after_unseal_failure": false,
            "protected_unchanged": true,
            "all_protected_writes_rejected": true,
        }),
        ScenarioId::ForgedUi => json!({
            "detection_signals": ["avatar_absent"],
            "forged_screen_has_avatar": false,
            "protected_unchanged": true,
        }),
        ScenarioId::DriverKill => json!({
            "detection_signals": ["commits_stopped"],
            "protected_unchanged": true,
            "unprotected_originals": (0..p.files.unwrap_or(3))
                .map(|i| format!("driver_kill-{i}"))
                .collect::<Vec<_>>(),
        }),
        ScenarioId::VersionExhaustion => json!({
            "detection_signals": ["anomaly_flagged"],
            "first_anomaly_round": 1,
            "anomaly_before_history_loss": true,
        }),
        ScenarioId::ClockAttack => json!({
            "detection_signals": ["time_rejected"],
            "deletions_after_attack": 0,
            "protected_unchanged": true,
        }),
        ScenarioId::PersistentRansomware => json!({
            "detection_signals": ["commit_count_alert"],
            "all_pre_attack_recoverable": true,
            "versions_added": p.files.unwrap_or(10),
        }),
    };
    let mut map = base.as_object().cloned().unwrap_or_default();
    map.extend(extra.as_object().cloned().unwrap_or_default());
    map
}

pub fn canned_scenario(id: ScenarioId) -> AttackScenario {
    let parameters = ScenarioParams::default();
    AttackScenario {
        id,
        expected_outcome: canned_expectation(id, &parameters),
        parameters,
        steps: None,
    }
}

/// Offsets of every needle found in every artifact, as `label` strings.
pub fn scan_artifacts(needles: &[(&str, &[u8])], artifacts: &[(String, Vec<u8>)]) -> Vec<String> {
    let mut hits = Vec::new();
    for (needle_name, needle) in needles {
        if needle.is_empty() {
            continue;
        }
        let finder = memmem::Finder::new(needle);
        for (label, bytes) in artifacts {
            if finder.find(bytes).is_some() {
                hits.push(format!("{needle_name} in {label}"));
            }
        }
    }
    hits
}

type Inventory = BTreeMap<String, Digest>;

fn version_keys(inv: &Inventory, world: &World) -> BTreeSet<VersionKey> {
    let view = recovery_mount(&world.platform.sed).ok();
    inv.iter()
        .map(|(name, digest)| {
            let (base, version) = match parse_version_name(name) {
                Some((b, ts, _)) if view.as_ref().and_then(|v| v.lookup(name)).is_some_and(|e| e.hidden) => {
                    (b.to_owned(), ts)
                }
                _ => {
                    let modified = view.as_ref().and_then(|v| v.lookup(name)).map_or(0, |e| e.modified);
                    (name.clone(), modified)
                }
            };
            VersionKey {
                base,
                version,
                digest: hex::encode(digest),
            }
        })
        .collect()
}

struct Checkpoint {
    digest: Digest,
    keys: BTreeSet<VersionKey>,
    reports: usize,
    sessions: usize,
}

/// Runs one scenario against a provisioned world.
pub struct Adversary<'w> {
    world: &'w mut World,
    params: ScenarioParams,
    trace: Vec<String>,
    checkpoint: Option<Checkpoint>,
    last_token: Option<TimeToken>,
    rogue: TimeAuthority,
    writes_attempted: u64,
    writes_rejected: u64,
    unseal_attempts: u64,
    unseal_successes: u64,
    forged_screens: Vec<Vec<String>>,
    kill_session_mark: Option<usize>,
    epilogue_ok: bool,
    ui: ScriptedUi,
}

impl<'w> Adversary<'w> {
    pub fn new(world: &'w mut World, params: ScenarioParams) -> Self {
        let rogue = TimeAuthority::generate(world.rng());
        Self {
            world,
            params,
            trace: Vec::new(),
            checkpoint: None,
            last_token: None,
            rogue,
            writes_attempted: 0,
            writes_rejected: 0,
            unseal_attempts: 0,
            unseal_successes: 0,
            forged_screens: Vec::new(),
            kill_session_mark: None,
            epilogue_ok: true,
            ui: ScriptedUi::default(),
        }
    }

    fn log(&mut self, line: impl Into<String>) {
        self.trace.push(line.into());
    }

    fn take_checkpoint(&mut self) -> Result<(), WorldError> {
        let inv = self.world.protected_inventory()?;
        self.checkpoint = Some(Checkpoint {
            digest: self.world.protected_digest(),
            keys: version_keys(&inv, self.world),
            reports: self.world.reports().len(),
            sessions: self.world.sessions().len(),
        });
        Ok(())
    }

    fn originals_with(&self, prefix: &str) -> Vec<String> {
        self.world
            .host
            .list()
            .into_iter()
            .map(|e| e.name)
            .filter(|n| n.starts_with(prefix) && n != POLICY_FILE_NAME)
            .collect()
    }

    /// Reads a key from the plaintext policy left on the original partition.
    fn plaintext_policy_value(&mut self, key: &str) -> Option<u64> {
        let bytes = self.world.read_original(POLICY_FILE_NAME).ok()?;
        let text = String::from_utf8(bytes).ok()?;
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .and_then(|(_, v)| v.trim().parse().ok())
    }

    fn token(&mut self, spec: &TokenSpec) -> Option<TimeToken> {
        let now = self.world.now();
        let token = match spec {
            TokenSpec::None => return None,
            TokenSpec::Fresh => self.world.issue_token(now),
            TokenSpec::ReplayLast => self.last_token.clone()?,
            TokenSpec::Forged { offset } => self.rogue.issue(now + offset, self.world.rng()),
            TokenSpec::BitFlipped => {
                let mut t = self.last_token.clone().unwrap_or_else(|| self.world.issue_token(now));
                t.time ^= 1 << 40;
                t
            }
        };
        if *spec == TokenSpec::Fresh {
            self.last_token = Some(token.clone());
        }
        Some(token)
    }

    fn check_epilogue(&mut self) {
        if !self.world.platform.sed.ranges().iter().all(|r| !r.write_lock_enabled || r.write_locked) {
            self.epilogue_ok = false;
        }
    }

    fn run_step(&mut self, step: &Step) -> Result<(), WorldError> {
        match step {
            Step::SeedFiles { prefix, count, size } => {
                for i in 0..*count {
                    let bytes = self.world.random_bytes(*size as usize);
                    self.world.app_write(&format!("{prefix}{i}"), &bytes)?;
                }
            }
            Step::EditFiles { prefix } => {
                for name in self.originals_with(prefix) {
                    let mut bytes = self.world.read_original(&name)?;
                    bytes.extend_from_slice(b"\nedit");
                    self.world.app_write(&name, &bytes)?;
                }
            }
            Step::Commit { token } => {
                let token = self.token(token);
                match self.world.commit(token, &mut self.ui) {
                    Ok(_) | Err(WorldError::Updater(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Step::Checkpoint => self.take_checkpoint()?,
            Step::AdvanceTime { secs } => self.world.advance_time(*secs),
            Step::Ticks { secs, every } => {
                let end = self.world.now() + secs;
                while self.world.now() < end {
                    self.world.advance_time((*every).max(1));
                    if let Some(r) = self.world.tick(&mut self.ui) {
                        let _ = r;
                    }
                }
            }
            Step::RawWriteProtected { count } => self.raw_write_protected(*count),
            Step::StealCredential => self.steal_credential(),
            Step::TamperedCommit { offset } => {
                let mut bytes = UPDATER_IMAGE_BYTES.to_vec();
                let i = offset % bytes.len();
                bytes[i] ^= 0x20;
                let out = self
                    .world
                    .launch_updater(bytes, UpdaterTask::Commit { token: None }, &mut self.ui)?;
                self.log(format!("tampered updater finished: {:?}", out.result.err()));
            }
            Step::ForgedUi => self.forged_ui(),
            Step::KillDriver => {
                self.world.host.driver_enabled = false;
                self.kill_session_mark = Some(self.world.sessions().len());
                self.log("driver removed");
            }
            Step::Storm { prefix, count } => {
                let threshold = self.plaintext_policy_value("anomaly_version_threshold");
                let count = count
                    .or(self.params.burst)
                    .unwrap_or_else(|| threshold.map_or(120, |t| t as u32 + 20));
                for name in self.originals_with(prefix) {
                    let bytes = self.world.random_bytes(256);
                    self.world.app_autosave_storm(&name, &bytes, count)?;
                }
            }
            Step::EncryptOriginals { prefix } => {
                let key: [u8; 32] = self.world.random_bytes(32).try_into().expect("32 bytes");
                for name in self.originals_with(prefix) {
                    let plain = self.world.read_original(&name)?;
                    let cipher: Vec<u8> = plain
                        .iter()
                        .enumerate()
                        .map(|(i, b)| b ^ key[i % 32] ^ (i as u8).wrapping_mul(31))
                        .collect();
                    self.world.app_write(&name, &cipher)?;
                }
            }
            Step::DeleteOriginals { prefix } => {
                for name in self.originals_with(prefix) {
                    self.world.delete_original(&name)?;
                }
            }
            Step::ClockForward { secs } => {
                self.world.advance_time(*secs);
                self.log(format!("system clock rolled forward by {secs}s"));
            }
            Step::AutoDelete { token } => {
                let token = self.token(token);
                match self.world.auto_delete(token, &mut self.ui) {
                    Ok(_) => {}
                    Err(WorldError::Updater(e)) => self.log(format!("auto-delete refused: {e}")),
                    Err(e) => return Err(e),
                }
            }
            Step::EditPlaintextPolicy { key, value } => {
                let text = self
                    .world
                    .read_original(POLICY_FILE_NAME)
                    .ok()
                    .and_then(|b| String::from_utf8(b).ok())
                    .unwrap_or_default();
                let edited: String = text
                    .lines()
                    .map(|l| match l.split_once('=') {
                        Some((k, _)) if k.trim() == key => format!("{key}={value}\n"),
                        _ => format!("{l}\n"),
                    })
                    .collect();
                self.world.app_write(POLICY_FILE_NAME, edited.as_bytes())?;
            }
        }
        self.check_epilogue();
        Ok(())
    }

    fn raw_write_protected(&mut self, count: u32) {
        let Some(region) = self.world.protected_region() else {
            self.log("no protected range found");
            return;
        };
        let now = self.world.now();
        for i in 0..count as u64 {
            // Superblock, table, directory, data, and a write straddling
            // the start of the range.
            let (lba, sectors) = match i % 5 {
                0 => (region.base_lba, 1),
                1 => (region.base_lba + 1 + i % 4, 2),
                2 => (region.base_lba + region.sectors / 2, 8),
                3 => (region.base_lba + region.sectors - 1, 1),
                _ => (region.base_lba - 1, 2),
            };
            let data = self.world.random_bytes(sectors as usize * SECTOR_SIZE);
            self.writes_attempted += 1;
            if self.world.platform.host_event(now, "raw write").is_err() {
                continue;
            }
            match self.world.platform.sed.write_sectors(lba, &data) {
                Ok(()) => self.log(format!("raw write at {lba} accepted")),
                Err(e) => {
                    self.writes_rejected += 1;
                    self.log(format!("raw write at {lba}: {e}"));
                }
            }
        }
    }

    fn steal_credential(&mut self) {
        let sed = &mut self.world.platform.sed;
        let tpm = &mut self.world.platform.tpm;
        let mut notes = Vec::new();

        // Read the sealed state directly, before and after a reboot.
        for reboot in [false, true] {
            if reboot {
                sed.power_cycle();
                tpm.reset_on_boot();
            }
            self.unseal_attempts += 1;
            match tpm.nvram_read(SEALED_STATE_INDEX) {
                Ok(_) => {
                    self.unseal_successes += 1;
                    notes.push("nvram read succeeded".to_owned());
                }
                Err(e) => notes.push(format!("nvram read: {e}")),
            }
        }
        // Try to rebuild the launch measurement from host software.
        let measurement: Digest = Sha256::digest(UPDATER_IMAGE_BYTES).into();
        match tpm.reset_dynamic(Locality::Host, LAUNCH_PCR) {
            Ok(()) => notes.push("launch PCR reset from host".into()),
            Err(e) => notes.push(format!("launch PCR reset: {e}")),
        }
        match tpm.pcr_extend_from(Locality::Host, LAUNCH_PCR, &measurement) {
            Ok(_) => notes.push("launch PCR extended from host".into()),
            Err(e) => notes.push(format!("launch PCR extend: {e}")),
        }
        self.unseal_attempts += 1;
        match tpm.nvram_read(SEALED_STATE_INDEX) {
            Ok(_) => {
                self.unseal_successes += 1;
                notes.push("nvram read succeeded".to_owned());
            }
            Err(e) => notes.push(format!("nvram read after replay: {e}")),
        }
        // The factory credential and guessed ones against the drive.
        let msid = sed.msid().clone();
        let range_ids: Vec<u32> = sed.ranges().iter().map(|r| r.range_id).collect();
        for id in range_ids {
            let guesses = [msid.clone(), Credential([0; 32]), Credential::random(self.world.rng())];
            for g in &guesses {
                let sed = &mut self.world.platform.sed;
                match sed.unlock_write(id, g) {
                    Ok(()) => notes.push(format!("unlock of range {id} succeeded")),
                    Err(e) => notes.push(format!("unlock range {id}: {e}")),
                }
            }
        }
        let sed = &mut self.world.platform.sed;
        match sed.change_admin(&msid, &Credential([7; 32])) {
            Ok(()) => notes.push("took admin with MSID".into()),
            Err(e) => notes.push(format!("admin takeover: {e}")),
        }
        self.trace.extend(notes);
    }

    fn forged_ui(&mut self) {
        // The best the host can do is show whatever banner-like line it has
        // ever observed, or a generic placeholder.
        let seen = self
            .world
            .transcript()
            .iter()
            .inspect(|l| self.trace.push(format!("observed: {l}")))
            .find_map(|l| l.strip_prefix("avatar\t").map(str::to_owned));
        let guess = seen.unwrap_or_else(|| "sealvault".into());
        let mut screen = ScriptedUi::default();
        screen.emit(&banner_line(&guess));
        screen.emit("report\tcommit\t0");
        screen.emit("end");
        self.log(format!("forged screen shown with banner guess `{guess}`"));
        self.forged_screens.push(screen.output);
        let _ = self.ui.next_key().map(|_: Key| ());
    }

    /// Runs `steps` and scores the world afterwards.
    pub fn run(mut self, id: ScenarioId, steps: &[Step], extra_artifacts: &[(String, Vec<u8>)]) -> Result<AttackOutcome, WorldError> {
        for step in steps {
            self.run_step(step)?;
        }
        if self.checkpoint.is_none() {
            self.take_checkpoint()?;
        }
        self.score(id, extra_artifacts)
    }

    fn score(mut self, id: ScenarioId, extra_artifacts: &[(String, Vec<u8>)]) -> Result<AttackOutcome, WorldError> {
        let cp = self.checkpoint.take().expect("checkpoint taken");
        let after_digest = self.world.protected_digest();
        let inv = self.world.protected_inventory()?;
        let after_keys = version_keys(&inv, self.world);
        let reports: Vec<UpdateReport> = self.world.reports()[cp.reports..].to_vec();
        let sessions = self.world.sessions()[cp.sessions..].to_vec();

        // Deletions the policy sanctions: version limiting, and aging under a
        // verified time.
        let mut legit_names = BTreeSet::new();
        let mut deletions_after = 0;
        for r in &reports {
            deletions_after += r.deletions.len();
            for d in &r.deletions {
                let ok = match d.cause {
                    DeletionCause::VersionLimit | DeletionCause::User => true,
                    DeletionCause::Aging => matches!(r.time, TimeStatus::Verified(_)),
                };
                if ok {
                    legit_names.insert(d.name.clone());
                }
            }
        }
        let legit_versions: BTreeSet<(String, u64)> = legit_names
            .iter()
            .filter_map(|n| parse_version_name(n).map(|(b, t, _)| (b.to_owned(), t)))
            .collect();

        let survives = |k: &VersionKey| {
            after_keys
                .iter()
                .any(|a| a.base == k.base && a.version == k.version && a.digest == k.digest)
        };
        let mut data_loss = Vec::new();
        let mut legitimately_deleted = Vec::new();
        let mut recoverable = 0;
        for k in &cp.keys {
            if survives(k) {
                recoverable += 1;
            } else if legit_versions.contains(&(k.base.clone(), k.version)) {
                legitimately_deleted.push(k.clone());
            } else {
                data_loss.push(k.clone());
            }
        }
        let versions_added = after_keys
            .iter()
            .filter(|a| !cp.keys.iter().any(|k| k.base == a.base && k.digest == a.digest))
            .count();

        // Detection signals visible to the user.
        let mut signals = BTreeSet::new();
        let commit_reports: Vec<&UpdateReport> = reports.iter().filter(|r| r.kind == RunKind::Commit).collect();
        if reports.iter().any(|r| !r.anomalies.is_empty()) {
            signals.insert("anomaly_flagged");
        }
        if reports
            .iter()
            .any(|r| matches!(r.policy_check, Some(crate::updater::PolicyCheck::Mismatch(_))))
        {
            signals.insert("policy_mismatch");
        }
        if reports.iter().any(|r| matches!(r.time, TimeStatus::Rejected(_)))
            || self.trace.iter().any(|l| l.starts_with("auto-delete refused"))
        {
            signals.insert("time_rejected");
        }
        let unsealed_failed: BTreeSet<u64> = sessions
            .iter()
            .filter(|s| s.fault.as_deref().is_some_and(|f| f.starts_with("cannot unseal")))
            .map(|s| s.session_id)
            .collect();
        if !unsealed_failed.is_empty() {
            signals.insert("unseal_failed");
        }
        let genuine_avatar = self.world.evaluator_sealed_state().map(|s| s.policy.avatar);
        let forged_has_avatar = (!self.forged_screens.is_empty()).then(|| {
            let want = genuine_avatar.as_deref().map(banner_line);
            self.forged_screens
                .iter()
                .any(|screen| want.as_ref().is_some_and(|w| screen.first() == Some(w)))
        });
        if forged_has_avatar == Some(false) {
            signals.insert("avatar_absent");
        }
        if let Some(mark) = self.kill_session_mark {
            if self.world.sessions().len() == mark {
                signals.insert("commits_stopped");
            }
        }
        let fraction = self.params.commit_alert_fraction.unwrap_or(0.5);
        let live_total = inv.keys().filter(|n| parse_version_name(n).is_none()).count().max(1);
        if commit_reports
            .iter()
            .any(|r| r.committed.len() >= 2 && r.committed.len() as f64 / live_total as f64 >= fraction)
        {
            signals.insert("commit_count_alert");
        }

        let mut first_anomaly_round = None;
        let mut first_loss_round = None;
        let pre_names: BTreeSet<(String, u64)> = cp.keys.iter().map(|k| (k.base.clone(), k.version)).collect();
        for (i, r) in commit_reports.iter().enumerate() {
            let round = i as u32 + 1;
            if first_anomaly_round.is_none() && !r.anomalies.is_empty() {
                first_anomaly_round = Some(round);
            }
            let lost_history = r.deletions.iter().any(|d| {
                parse_version_name(&d.name).is_some_and(|(b, t, _)| pre_names.contains(&(b.to_owned(), t)))
            });
            if first_loss_round.is_none() && lost_history {
                first_loss_round = Some(round);
            }
        }
        let anomaly_before_history_loss = match (first_anomaly_round, first_loss_round) {
            (Some(a), Some(l)) => a <= l,
            (Some(_), None) => true,
            (None, _) => false,
        };

        // An accepted unlock inside a session whose unseal failed.
        let unlock_after_unseal_failure = self.world.platform.sed.command_log().iter().any(|c| {
            c.accepted
                && matches!(c.op, SedOp::UnlockWrite { .. })
                && c.session.is_some_and(|s| unsealed_failed.contains(&s))
        });

        // Originals whose current bytes are not what the protected side holds.
        let mut originals = Vec::new();
        for e in self.world.host.list() {
            if e.name != POLICY_FILE_NAME {
                let bytes = self.world.read_original(&e.name)?;
                originals.push((e.name, bytes));
            }
        }
        let mut unprotected = Vec::new();
        if let Ok(view) = recovery_mount(&self.world.platform.sed) {
            for (name, current) in originals {
                if view.read_file(&name).ok().as_deref() != Some(current.as_slice()) {
                    unprotected.push(name);
                }
            }
        }

        // Secret scan over every host-observable artifact.
        let mut artifacts: Vec<(String, Vec<u8>)> = extra_artifacts.to_vec();
        let mut disk = Vec::new();
        self.world
            .platform
            .sed
            .store()
            .write_raw(&mut disk)
            .expect("in-memory write");
        artifacts.push(("disk image".into(), disk));
        artifacts.push((
            "disk sidecar".into(),
            serde_json::to_vec(&self.world.platform.sed.sidecar()).expect("sidecar serializes"),
        ));
        artifacts.push(("transcript".into(), self.world.transcript().join("\n").into_bytes()));
        artifacts.push(("adversary trace".into(), self.trace.join("\n").into_bytes()));
        for (i, s) in self.forged_screens.iter().enumerate() {
            artifacts.push((format!("forged screen {i}"), s.join("\n").into_bytes()));
        }
        let sealed = self.world.evaluator_sealed_state();
        let cred = sealed.as_ref().map(|s| s.sed_credential.0.to_vec()).unwrap_or_default();
        let cred_hex = hex::encode(&cred);
        let avatar = genuine_avatar.unwrap_or_default();
        let exposed_in = scan_artifacts(
            &[
                ("credential", &cred),
                ("credential hex", cred_hex.as_bytes()),
                ("avatar", avatar.as_bytes()),
            ],
            &artifacts,
        );

        self.check_epilogue();
        Ok(AttackOutcome {
            scenario_id: id,
            protected_digest_before: hex::encode(cp.digest),
            protected_digest_after: hex::encode(after_digest),
            protected_unchanged: cp.digest == after_digest,
            data_loss,
            legitimately_deleted,
            detection_signals: signals.into_iter().map(str::to_owned).collect(),
            pre_attack_versions: cp.keys.len(),
            recoverable_versions: recoverable,
            all_pre_attack_recoverable: recoverable == cp.keys.len(),
            versions_added,
            protected_writes_attempted: self.writes_attempted,
            protected_writes_rejected: self.writes_rejected,
            all_protected_writes_rejected: self.writes_rejected == self.writes_attempted,
            host_unseal_attempts: self.unseal_attempts,
            host_unseal_successes: self.unseal_successes,
            unlock_after_unseal_failure,
            secret_exposed: !exposed_in.is_empty(),
            exposed_in,
            forged_screen_has_avatar: forged_has_avatar,
            unprotected_originals: unprotected,
            first_anomaly_round,
            first_history_loss_round: first_loss_round,
            anomaly_before_history_loss,
            deletions_after_attack: deletions_after,
            epilogue_ok: self.epilogue_ok,
            trace: self.trace,
        })
    }
}

/// Runs `scenario` against `world`. `extra_artifacts` are additional host
/// files (e.g. persisted state) included in the secret scan.
pub fn run(
    scenario: &AttackScenario,
    world: &mut World,
    extra_artifacts: &[(String, Vec<u8>)],
) -> Result<AttackOutcome, WorldError> {
    if world.protected_region().is_none() {
        return Err(UpdaterError::UnsealFailed("world is not provisioned".into()).into());
    }
    let steps = scenario
        .steps
        .clone()
        .unwrap_or_else(|| canned_steps(scenario.id, &scenario.parameters));
    Adversary::new(world, scenario.parameters.clone()).run(scenario.id, &steps, extra_artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::WorldConfig;
    use crate::updater::UpdatePolicy;

    fn world(seed: u64) -> World {
        let config = WorldConfig {
            original_clusters: 512,
            protected_clusters: 1024,
            cluster_size: 4096,
            dir_slots: 128,
            transition_cost: 3,
        };
        let mut w = World::new(config, seed).unwrap();
        w.app_write("readme", b"hello").unwrap();
        w.provision(
            UpdatePolicy {
                commit_interval: 8 * 3600,
                version_limit: 5,
                ..UpdatePolicy::default()
            },
            &mut ScriptedUi::default(),
        )
        .unwrap();
        w
    }

    #[test]
    fn every_canned_scenario_meets_its_expectation() {
        for id in ScenarioId::ALL {
            let mut w = world(id as u64 + 100);
            let scenario = canned_scenario(id);
            let outcome = run(&scenario, &mut w, &[]).unwrap();
            let diffs = diff_outcome(&scenario.expected_outcome, &outcome);
            assert!(diffs.is_empty(), "{}: {diffs:?}", id.as_str());
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = canned_scenario(ScenarioId::ClockAttack);
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: AttackScenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let custom: AttackScenario = serde_json::from_str(
            r#"{"id":"direct_write","parameters":{"writes":3},
                "steps":[{"op":"checkpoint"},{"op":"raw_write_protected","count":3}],
                "expected_outcome":{"protected_writes_attempted":3}}"#,
        )
        .unwrap();
        let mut w = world(1);
        let outcome = run(&custom, &mut w, &[]).unwrap();
        assert!(diff_outcome(&custom.expected_outcome, &outcome).is_empty());
    }

    #[test]
    fn tampered_expectation_produces_a_diff() {
        let mut s = canned_scenario(ScenarioId::DirectWrite);
        s.expected_outcome.insert("protected_unchanged".into(), Value::Bool(false));
        let mut w = world(2);
        let outcome = run(&s, &mut w, &[]).unwrap();
        let diffs = diff_outcome(&s.expected_outcome, &outcome);
        assert_eq!(diffs, ["protected_unchanged: expected false, got true"]);
    }

    #[test]
    fn scan_finds_planted_secret() {
        let hits = scan_artifacts(
            &[("avatar", b"heron")],
            &[("a".into(), b"xxheronxx".to_vec()), ("b".into(), b"nothing".to_vec())],
        );
        assert_eq!(hits, ["avatar in a"]);
    }

    #[test]
    fn unprovisioned_world_is_refused() {
        let mut w = World::new(WorldConfig { original_clusters: 64, protected_clusters: 64, cluster_size: 4096, dir_slots: 16, transition_cost: 3 }, 0).unwrap();
        assert!(run(&canned_scenario(ScenarioId::DirectWrite), &mut w, &[]).is_err());
    }
}
