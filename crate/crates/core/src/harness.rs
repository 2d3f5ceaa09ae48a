//! Operator commands over a simulator state kept in a directory.
//!
//! Layout of a state directory:
//! - `disk.img`: raw sectors of the self-encrypting drive,
//! - `disk.json`: its sidecar (geometry and locking ranges),
//! - `sim.json`: everything else the simulated machine holds (secure-element
//!   contents, clock, schedule, RNG positions),
//! - `transcript.log`: append-only, tab-separated record of every command.
//!
//! Nothing here reads the wall clock; time moves only via `--now`,
//! `--advance` and `advance-time`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::adversary::{self, AttackScenario};
use crate::host::recovery_mount;
use crate::sed::SedDevice;
use crate::sim::{World, WorldConfig, WorldError, WorldState};
use crate::tee::{Key, UiChannel};
use crate::updater::{PolicyError, UpdatePolicy, UpdateReport, UpdaterError};

pub const DISK_IMAGE: &str = "disk.img";
pub const DISK_SIDECAR: &str = "disk.json";
pub const SIM_STATE: &str = "sim.json";
pub const TRANSCRIPT: &str = "transcript.log";
pub const RECOVERY_MANIFEST: &str = "MANIFEST.tsv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("no simulator state in {0}; run `provision` first")]
    NoState(PathBuf),
    #[error("corrupt simulator state: {0}")]
    State(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("scenario outcome differs from expectation:\n{}", .0.join("\n"))]
    Mismatch(Vec<String>),
}

impl HarnessError {
    /// 2 for bad invocations, 1 for everything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<PolicyError> for HarnessError {
    fn from(e: PolicyError) -> Self {
        HarnessError::Usage(format!("policy file: {e}"))
    }
}

/// Global options shared by every verb.
#[derive(Debug, Clone)]
pub struct Harness {
    pub dir: PathBuf,
    /// Seed for a state created by this invocation; existing states keep
    /// their own.
    pub seed: u64,
    /// Moves the simulated clock forward to this time before the command.
    pub now: Option<u64>,
}

impl Harness {
    pub fn new(dir: impl Into<PathBuf>, seed: u64, now: Option<u64>) -> Self {
        Self {
            dir: dir.into(),
            seed,
            now,
        }
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn exists(&self) -> bool {
        self.path(SIM_STATE).is_file()
    }

    pub fn load(&self) -> Result<World, HarnessError> {
        if !self.exists() {
            return Err(HarnessError::NoState(self.dir.clone()));
        }
        let state: WorldState = serde_json::from_slice(&fs::read(self.path(SIM_STATE))?)
            .map_err(|e| HarnessError::State(format!("{SIM_STATE}: {e}")))?;
        let sed = SedDevice::import_image(&self.path(DISK_IMAGE), &self.path(DISK_SIDECAR), &state.device)
            .map_err(|e| HarnessError::State(format!("{DISK_IMAGE}: {e}")))?;
        World::restore(&state, sed).map_err(HarnessError::State)
    }

    /// Writes the machine state and appends pending transcript lines.
    pub fn save(&self, world: &mut World) -> Result<(), HarnessError> {
        fs::create_dir_all(&self.dir)?;
        let mut sim = serde_json::to_vec_pretty(&world.state()).expect("state serializes");
        sim.push(b'\n');
        fs::write(self.path(SIM_STATE), sim)?;
        world
            .platform
            .sed
            .export_image(&self.path(DISK_IMAGE), &self.path(DISK_SIDECAR))?;
        let lines = world.take_transcript();
        if !lines.is_empty() {
            let mut log = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.path(TRANSCRIPT))?;
            for l in lines {
                writeln!(log, "{l}")?;
            }
        }
        Ok(())
    }

    pub fn transcript_text(&self) -> Result<String, HarnessError> {
        match fs::read_to_string(self.path(TRANSCRIPT)) {
            Ok(t) => Ok(t),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(String::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn begin(&self, world: &mut World, verb: &str) {
        if let Some(t) = self.now {
            world.set_time(t);
        }
        world.note(format!("cmd\t{verb}\tseed\t{}\tnow\t{}", world.seed(), world.now()));
    }

    fn open(&self, verb: &str) -> Result<World, HarnessError> {
        let mut world = self.load()?;
        self.begin(&mut world, verb);
        Ok(world)
    }

    /// Creates a factory-fresh machine, copies `files` onto the original
    /// partition and runs the provisioning session.
    pub fn provision(
        &self,
        files: &[PathBuf],
        policy_text: &str,
        config: WorldConfig,
        out: &mut dyn Write,
    ) -> Result<(), HarnessError> {
        let policy = UpdatePolicy::parse(policy_text)?;
        let mut world = if self.exists() {
            self.load()?
        } else {
            World::new(config, self.seed)?
        };
        self.begin(&mut world, "provision");
        let mut named = BTreeMap::new();
        for f in files {
            let name = f
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| HarnessError::Usage(format!("bad file name {}", f.display())))?;
            named.insert(name.to_owned(), fs::read(f)?);
        }
        let mut ui = WriterUi::new(out);
        if world.protected_region().is_some() {
            return Err(WorldError::Updater(UpdaterError::AlreadyProvisioned).into());
        }
        for (name, bytes) in &named {
            world
                .app_write(name, bytes)
                .map_err(|e| HarnessError::World(e.into()))?;
        }
        world.provision(policy, &mut ui)?;
        ui.finish()?;
        self.save(&mut world)
    }

    /// One manual commit session. A fresh signed time is attached unless
    /// `without_token`.
    pub fn commit(&self, advance: Option<u64>, without_token: bool, out: &mut dyn Write) -> Result<(), HarnessError> {
        let mut world = self.open("commit")?;
        if let Some(s) = advance {
            world.advance_time(s);
        }
        let mut ui = WriterUi::new(out);
        let result = if without_token {
            world.commit(None, &mut ui)
        } else {
            world.commit_now(&mut ui)
        };
        ui.finish()?;
        self.save(&mut world)?;
        result.map(drop).map_err(Into::into)
    }

    /// The deletion browser, fed by `input` (a terminal or a key script).
    pub fn browse_delete(&self, input: &mut dyn Read, out: &mut dyn Write) -> Result<(), HarnessError> {
        let mut world = self.open("browse-delete")?;
        let mut ui = WriterUi::with_input(out, input);
        let result = world.browse_delete(&mut ui);
        ui.finish()?;
        self.save(&mut world)?;
        match result {
            // Walking away from the browser is a normal outcome.
            Ok(_) | Err(WorldError::Updater(UpdaterError::Aborted)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs a scenario and prints its outcome as JSON. A state directory
    /// without a machine gets a freshly provisioned one first.
    pub fn attack(&self, scenario: &AttackScenario, out: &mut dyn Write) -> Result<(), HarnessError> {
        let mut world = if self.exists() {
            self.load()?
        } else {
            demo_world(self.seed)?
        };
        self.begin(&mut world, "attack");
        let mut extra = Vec::new();
        let transcript = self.transcript_text()?;
        if !transcript.is_empty() {
            extra.push((TRANSCRIPT.to_owned(), transcript.into_bytes()));
        }
        let outcome = adversary::run(scenario, &mut world, &extra)?;
        world.note(format!("attack\t{}", scenario.id.as_str()));
        let diffs = adversary::diff_outcome(&scenario.expected_outcome, &outcome);
        world.note(format!(
            "attack_result\t{}\t{}",
            scenario.id.as_str(),
            if diffs.is_empty() { "match" } else { "mismatch" }
        ));
        serde_json::to_writer_pretty(&mut *out, &outcome.to_json()).map_err(io::Error::from)?;
        writeln!(out)?;
        self.save(&mut world)?;
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Mismatch(diffs))
        }
    }

    /// Exports every entry of the protected partition, history included,
    /// through the credential-free read-only mount. Does not touch the state.
    pub fn recover(&self, out_dir: &Path, out: &mut dyn Write) -> Result<usize, HarnessError> {
        let world = self.load()?;
        let view = recovery_mount(&world.platform.sed).map_err(|e| HarnessError::World(e.into()))?;
        fs::create_dir_all(out_dir)?;
        let mut manifest = String::from("name\tsize\tmodified\thidden\tsha256\n");
        let entries = view.list(true);
        for e in &entries {
            let bytes = view.read_file(&e.name).map_err(|e| HarnessError::World(e.into()))?;
            fs::write(out_dir.join(&e.name), &bytes)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{digest}\n",
                e.name,
                e.size,
                e.modified,
                if e.hidden { "H" } else { "-" }
            ));
        }
        fs::write(out_dir.join(RECOVERY_MANIFEST), &manifest)?;
        writeln!(out, "recovered {} files into {}", entries.len(), out_dir.display())?;
        Ok(entries.len())
    }

    /// Reports recorded in the transcript; only the latest unless `all`.
    pub fn report(&self, all: bool, out: &mut dyn Write) -> Result<(), HarnessError> {
        let reports = UpdateReport::parse_transcript(&self.transcript_text()?);
        let shown: &[UpdateReport] = if all {
            &reports
        } else {
            reports.last().map(std::slice::from_ref).unwrap_or_default()
        };
        if shown.is_empty() {
            writeln!(out, "no reports yet")?;
        }
        for r in shown {
            for l in r.to_lines(true) {
                writeln!(out, "{l}")?;
            }
        }
        Ok(())
    }

    /// Moves the clock forward, letting the OS driver fire scheduled
    /// commits at their due times along the way.
    pub fn advance_time(&self, secs: u64, out: &mut dyn Write) -> Result<(), HarnessError> {
        let mut world = self.open("advance-time")?;
        let target = world.now() + secs;
        let mut ui = WriterUi::new(out);
        let result = run_driver_until(&mut world, target, &mut ui);
        world.set_time(target);
        ui.finish()?;
        writeln!(out, "now\t{}", world.now())?;
        self.save(&mut world)?;
        result
    }

    /// Replays a host workload file. One command per line:
    /// `write NAME SIZE`, `write NAME @PATH`, `text NAME CONTENT...`,
    /// `storm NAME COUNT`, `delete NAME`, `advance SECS`, `commit`,
    /// `trigger`. Blank lines and `#` comments are ignored.
    pub fn run_workload(&self, script: &str, base: &Path, out: &mut dyn Write) -> Result<(), HarnessError> {
        let mut world = self.open("run-workload")?;
        let mut ui = WriterUi::new(out);
        let result = apply_workload(&mut world, script, base, &mut ui);
        ui.finish()?;
        self.save(&mut world)?;
        result
    }
}

/// A machine with default geometry, one user file and a random avatar,
/// provisioned and ready to be attacked.
pub fn demo_world(seed: u64) -> Result<World, HarnessError> {
    let mut w = World::new(WorldConfig::default(), seed)?;
    let avatar = format!("avatar-{}", hex::encode(w.random_bytes(6)));
    let policy = UpdatePolicy {
        avatar,
        ..UpdatePolicy::default()
    };
    w.app_write("notes.txt", b"first day")
        .map_err(|e| HarnessError::World(e.into()))?;
    w.provision(policy, &mut crate::tee::ScriptedUi::default())?;
    Ok(w)
}

fn run_driver_until(world: &mut World, target: u64, ui: &mut dyn UiChannel) -> Result<(), HarnessError> {
    loop {
        let s = world.host.schedule;
        let due = if s.manual_trigger_pending {
            world.now()
        } else if s.interval > 0 && world.host.driver_enabled {
            s.next_fire
        } else {
            break;
        };
        if due > target {
            break;
        }
        world.set_time(due);
        match world.tick(ui) {
            Some(r) => {
                // A failed session is already on the transcript; keep going.
                if let Err(e) = r {
                    world.note(format!("driver\tcommit failed\t{e}"));
                }
            }
            None => break,
        }
    }
    Ok(())
}

fn usage(line_no: usize, msg: &str) -> HarnessError {
    HarnessError::Usage(format!("workload line {line_no}: {msg}"))
}

fn apply_workload(world: &mut World, script: &str, base: &Path, ui: &mut dyn UiChannel) -> Result<(), HarnessError> {
    let host = |e: crate::host::HostError| HarnessError::World(e.into());
    for (i, raw) in script.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, char::is_whitespace);
        let verb = parts.next().unwrap_or_default();
        let a = parts.next();
        let b = parts.next().map(str::trim);
        let num = |s: Option<&str>| -> Result<u64, HarnessError> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| usage(n, "expected a number"))
        };
        match verb {
            "write" => {
                let name = a.ok_or_else(|| usage(n, "write needs a name"))?;
                let bytes = match b {
                    Some(p) if p.starts_with('@') => fs::read(base.join(&p[1..]))?,
                    other => {
                        let size = num(other)?;
                        world.random_bytes(size as usize)
                    }
                };
                world.app_write(name, &bytes).map_err(host)?;
            }
            "text" => {
                let name = a.ok_or_else(|| usage(n, "text needs a name"))?;
                world.app_write(name, b.unwrap_or_default().as_bytes()).map_err(host)?;
            }
            "storm" => {
                let name = a.ok_or_else(|| usage(n, "storm needs a name"))?;
                let count = num(b)? as u32;
                let bytes = world.random_bytes(256);
                world.app_autosave_storm(name, &bytes, count).map_err(host)?;
            }
            "delete" => {
                world
                    .delete_original(a.ok_or_else(|| usage(n, "delete needs a name"))?)
                    .map_err(host)?;
            }
            "advance" => {
                let target = world.now() + num(a)?;
                run_driver_until(world, target, ui)?;
                world.set_time(target);
            }
            "commit" => {
                if let Err(e) = world.commit_now(ui) {
                    world.note(format!("workload\tcommit failed\t{e}"));
                }
            }
            "trigger" => {
                world.request_manual_commit();
                let now = world.now();
                run_driver_until(world, now, ui)?;
            }
            other => return Err(usage(n, &format!("unknown command `{other}`"))),
        }
    }
    Ok(())
}

/// Session screen on a byte stream; keys come from an optional reader.
pub struct WriterUi<'a> {
    out: &'a mut dyn Write,
    input: Option<&'a mut dyn Read>,
    pending: std::collections::VecDeque<Key>,
    error: Option<io::Error>,
}

impl<'a> WriterUi<'a> {
    pub fn new(out: &'a mut dyn Write) -> Self {
        Self {
            out,
            input: None,
            pending: Default::default(),
            error: None,
        }
    }

    pub fn with_input(out: &'a mut dyn Write, input: &'a mut dyn Read) -> Self {
        Self {
            input: Some(input),
            ..Self::new(out)
        }
    }

    /// Surfaces the first write error, if any.
    pub fn finish(self) -> io::Result<()> {
        match self.error {
            Some(e) => Err(e),
            None => self.out.flush(),
        }
    }
}

impl UiChannel for WriterUi<'_> {
    fn emit(&mut self, line: &str) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{line}").and_then(|()| self.out.flush()) {
                self.error = Some(e);
            }
        }
    }

    fn next_key(&mut self) -> Option<Key> {
        while self.pending.is_empty() {
            let input = self.input.as_mut()?;
            let mut buf = [0u8; 256];
            // A terminal in cooked mode hands over one line at a time, which
            // is fine: every byte of it is still a key.
            let n = loop {
                match input.read(&mut buf) {
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    other => break other.unwrap_or(0),
                }
            };
            if n == 0 {
                self.input = None;
                return None;
            }
            self.pending.extend(Key::parse_stream(&buf[..n]));
        }
        self.pending.pop_front()
    }
}

/// Reads a workload or policy argument; `-` means stdin.
pub fn read_arg_file(path: &Path) -> io::Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        for line in io::stdin().lock().lines() {
            s.push_str(&line?);
            s.push('\n');
        }
        Ok(s)
    } else {
        fs::read_to_string(path)
    }
}
