//! Exclusive late-launch environment.
//!
//! [`Platform`] owns the drive and the TPM. [`Platform::late_launch`] measures
//! a program image into the launch PCR, hands the program exclusive handles to
//! both devices plus the user I/O channel, and always runs the epilogue:
//! every enabled SED lock is re-engaged and the launch PCR is capped so no
//! sealed secret stays reachable once the host resumes.
//!
//! Host-world actions are gated through [`Platform::host_event`], which
//! refuses anything scheduled inside a session window.

use std::collections::VecDeque;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::block::Digest;
use crate::sed::{SedDevice, SedOp};
use crate::tpm::{Locality, Tpm, LAUNCH_PCR};

pub const DEFAULT_TRANSITION_COST: u64 = 3;
pub const MIN_TRANSITION_COST: u64 = 2;
pub const MAX_TRANSITION_COST: u64 = 4;

/// Measurement extended into the launch PCR when a session ends.
pub fn session_exit_marker() -> Digest {
    Sha256::digest(b"late-launch-session-exit").into()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeeError {
    #[error("a late-launch session is already active")]
    SessionActive,
    #[error("host world is suspended by an exclusive session")]
    WorldSuspended,
    #[error("transition cost {0}s outside the supported 2-4s")]
    BadTransitionCost(u64),
}

/// User-facing keys understood by in-session UIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Key {
    Up,
    Down,
    Toggle,
    Group,
    Enter,
    Yes,
    No,
    Quit,
}

impl Key {
    /// Decodes a key stream: `j`/`k` or arrow escapes move, space toggles,
    /// `g` group-selects, Enter finishes, `y`/`n` answer, `q`/ESC quit.
    /// Unknown bytes are skipped.
    pub fn parse_stream(input: &[u8]) -> Vec<Key> {
        let mut keys = Vec::new();
        let mut i = 0;
        while i < input.len() {
            let b = input[i];
            i += 1;
            let key = match b {
                b'j' => Key::Down,
                b'k' => Key::Up,
                b' ' => Key::Toggle,
                b'g' => Key::Group,
                b'\n' | b'\r' => Key::Enter,
                b'y' | b'Y' => Key::Yes,
                b'n' | b'N' => Key::No,
                b'q' => Key::Quit,
                0x1b if input.get(i) == Some(&b'[') => {
                    i += 2;
                    match input.get(i - 1) {
                        Some(b'A') => Key::Up,
                        Some(b'B') => Key::Down,
                        _ => continue,
                    }
                }
                0x1b => Key::Quit,
                _ => continue,
            };
            keys.push(key);
        }
        keys
    }
}

/// The only I/O path into a session.
pub trait UiChannel {
    fn emit(&mut self, line: &str);
    /// Next key, or `None` when input is exhausted.
    fn next_key(&mut self) -> Option<Key>;
}

/// A UI channel fed from a prepared key script, capturing output lines.
#[derive(Debug, Default, Clone)]
pub struct ScriptedUi {
    input: VecDeque<Key>,
    pub output: Vec<String>,
}

impl ScriptedUi {
    pub fn new(keys: impl IntoIterator<Item = Key>) -> Self {
        Self {
            input: keys.into_iter().collect(),
            output: Vec::new(),
        }
    }

    pub fn from_script(script: &str) -> Self {
        Self::new(Key::parse_stream(script.as_bytes()))
    }
}

impl UiChannel for ScriptedUi {
    fn emit(&mut self, line: &str) {
        self.output.push(line.to_owned());
    }

    fn next_key(&mut self) -> Option<Key> {
        self.input.pop_front()
    }
}

/// A program image: the bytes that get measured and the behavior they stand
/// for. The measurement is recomputed from `bytes` on every launch.
#[derive(Debug, Clone)]
pub struct ProgramImage<P> {
    pub name: String,
    pub bytes: Vec<u8>,
    pub entry: P,
}

impl<P> ProgramImage<P> {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>, entry: P) -> Self {
        Self {
            name: name.into(),
            bytes,
            entry,
        }
    }

    pub fn code_digest(&self) -> Digest {
        Sha256::digest(&self.bytes).into()
    }
}

/// Behavior run inside a session.
pub trait TeeProgram {
    type Output;
    type Error: fmt::Display;

    fn run(&mut self, ctx: &mut SessionContext<'_>) -> Result<Self::Output, Self::Error>;
}

/// Exclusive handles granted to a running program.
pub struct SessionContext<'a> {
    pub session_id: u64,
    pub measured_digest: Digest,
    /// Simulated time at session start.
    pub now: u64,
    pub sed: &'a mut SedDevice,
    pub tpm: &'a mut Tpm,
    pub ui: &'a mut dyn UiChannel,
    pub rng: &'a mut ChaCha20Rng,
    notes: Vec<String>,
}

impl SessionContext<'_> {
    /// Appends a line to the session transcript.
    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: u64,
    pub image_name: String,
    #[serde(with = "crate::sed::hex32")]
    pub measured_digest: Digest,
    pub start_tick: u64,
    pub end_tick: u64,
    pub fault: Option<String>,
}

#[derive(Debug)]
pub struct SessionOutcome<O, E> {
    pub record: SessionRecord,
    pub result: Result<O, E>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimelineEvent {
    SessionStart { session_id: u64, tick: u64 },
    SessionEnd { session_id: u64, tick: u64 },
    Host { tick: u64, action: String, accepted: bool },
}

/// Accepted host events whose tick falls inside a session window that was
/// already open, or opened earlier, at that point of the log. Returns the
/// offending ticks.
pub fn exclusivity_violations(timeline: &[TimelineEvent]) -> Vec<u64> {
    let mut windows: Vec<(u64, Option<u64>)> = Vec::new();
    let mut bad = Vec::new();
    for ev in timeline {
        match ev {
            TimelineEvent::SessionStart { tick, .. } => windows.push((*tick, None)),
            TimelineEvent::SessionEnd { tick, .. } => {
                if let Some(w) = windows.last_mut() {
                    w.1 = Some(*tick);
                }
            }
            TimelineEvent::Host { tick, accepted: true, .. } => {
                if windows.iter().any(|(s, e)| s <= tick && e.is_none_or(|e| *tick < e)) {
                    bad.push(*tick);
                }
            }
            TimelineEvent::Host { .. } => {}
        }
    }
    bad
}

/// Persisted platform state (devices are persisted separately).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformState {
    pub clock: u64,
    pub transition_cost: u64,
    pub next_session_id: u64,
    #[serde(with = "crate::sed::hex32")]
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

/// The machine: drive, TPM, simulated clock and the session gate.
pub struct Platform {
    pub sed: SedDevice,
    pub tpm: Tpm,
    rng: ChaCha20Rng,
    clock: u64,
    transition_cost: u64,
    active: Option<u64>,
    next_session_id: u64,
    windows: Vec<(u64, u64)>,
    timeline: Vec<TimelineEvent>,
    transcript: Vec<String>,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform")
            .field("sed", &self.sed)
            .field("clock", &self.clock)
            .field("active", &self.active)
            .finish_non_exhaustive()
    }
}

impl Platform {
    pub fn new(sed: SedDevice, tpm: Tpm, rng_seed: [u8; 32]) -> Self {
        Self {
            sed,
            tpm,
            rng: ChaCha20Rng::from_seed(rng_seed),
            clock: 0,
            transition_cost: DEFAULT_TRANSITION_COST,
            active: None,
            next_session_id: 1,
            windows: Vec::new(),
            timeline: Vec::new(),
            transcript: Vec::new(),
        }
    }

    pub fn state(&self) -> PlatformState {
        PlatformState {
            clock: self.clock,
            transition_cost: self.transition_cost,
            next_session_id: self.next_session_id,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(sed: SedDevice, tpm: Tpm, state: &PlatformState) -> Self {
        let mut rng = ChaCha20Rng::from_seed(state.rng_seed);
        rng.set_word_pos(state.rng_word_pos);
        Self {
            sed,
            tpm,
            rng,
            clock: state.clock,
            transition_cost: state.transition_cost,
            active: None,
            next_session_id: state.next_session_id,
            windows: Vec::new(),
            timeline: Vec::new(),
            transcript: Vec::new(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Moves the clock forward; never backward.
    pub fn advance_to(&mut self, now: u64) {
        self.clock = self.clock.max(now);
    }

    /// Simulated seconds charged per launch.
    pub fn transition_cost(&self) -> u64 {
        self.transition_cost
    }

    pub fn set_transition_cost(&mut self, secs: u64) -> Result<(), TeeError> {
        if !(MIN_TRANSITION_COST..=MAX_TRANSITION_COST).contains(&secs) {
            return Err(TeeError::BadTransitionCost(secs));
        }
        self.transition_cost = secs;
        Ok(())
    }

    pub fn session_active(&self) -> bool {
        self.active.is_some()
    }

    pub fn timeline(&self) -> &[TimelineEvent] {
        &self.timeline
    }

    pub fn session_windows(&self) -> &[(u64, u64)] {
        &self.windows
    }

    pub fn take_transcript(&mut self) -> Vec<String> {
        std::mem::take(&mut self.transcript)
    }

    /// True when `tick` falls inside a recorded session window.
    pub fn in_session_window(&self, tick: u64) -> bool {
        self.windows
            .iter()
            .rev()
            .take_while(|(_, end)| *end > tick)
            .any(|(start, end)| *start <= tick && tick < *end)
    }

    /// Admits a host-world action at `now`, or refuses it if an exclusive
    /// session owns the machine at that time. Every attempt is logged.
    pub fn host_event(&mut self, now: u64, action: &str) -> Result<(), TeeError> {
        let suspended = self.active.is_some() || self.in_session_window(now);
        self.timeline.push(TimelineEvent::Host {
            tick: now,
            action: action.to_owned(),
            accepted: !suspended,
        });
        if suspended {
            return Err(TeeError::WorldSuspended);
        }
        self.advance_to(now);
        Ok(())
    }

    /// Measures and runs `image` with exclusive access to the devices.
    ///
    /// The session starts at `max(now, clock)` and lasts one transition cost.
    pub fn late_launch<P: TeeProgram>(
        &mut self,
        image: &mut ProgramImage<P>,
        ui: &mut dyn UiChannel,
        now: u64,
    ) -> Result<SessionOutcome<P::Output, P::Error>, TeeError> {
        if self.active.is_some() {
            return Err(TeeError::SessionActive);
        }
        let session_id = self.next_session_id;
        self.next_session_id += 1;
        let start_tick = self.clock.max(now);
        let end_tick = start_tick + self.transition_cost;
        self.active = Some(session_id);
        self.timeline.push(TimelineEvent::SessionStart {
            session_id,
            tick: start_tick,
        });

        let measured_digest = image.code_digest();
        self.tpm
            .reset_dynamic(Locality::LateLaunch, LAUNCH_PCR)
            .expect("launch PCR is dynamic");
        self.tpm
            .pcr_extend(LAUNCH_PCR, &measured_digest)
            .expect("launch PCR index is valid");
        self.sed.set_session_tag(Some(session_id));
        let log_start = self.sed.command_log().len();

        let mut ctx = SessionContext {
            session_id,
            measured_digest,
            now: start_tick,
            sed: &mut self.sed,
            tpm: &mut self.tpm,
            ui,
            rng: &mut self.rng,
            notes: Vec::new(),
        };
        let result = image.entry.run(&mut ctx);
        let notes = std::mem::take(&mut ctx.notes);

        // Epilogue: runs whatever the program did.
        self.sed.relock_all();
        self.tpm
            .pcr_extend(LAUNCH_PCR, &session_exit_marker())
            .expect("launch PCR index is valid");
        self.sed.set_session_tag(None);
        self.active = None;
        self.windows.push((start_tick, end_tick));
        self.timeline.push(TimelineEvent::SessionEnd {
            session_id,
            tick: end_tick,
        });
        self.clock = end_tick;

        let fault = result.as_ref().err().map(|e| e.to_string());
        let record = SessionRecord {
            session_id,
            image_name: image.name.clone(),
            measured_digest,
            start_tick,
            end_tick,
            fault: fault.clone(),
        };

        self.transcript.push(format!(
            "session\t{session_id}\t{}\t{start_tick}\t{end_tick}\t{}",
            image.name,
            hex::encode(measured_digest)
        ));
        let mut writes = 0u64;
        for cmd in &self.sed.command_log()[log_start..] {
            match &cmd.op {
                SedOp::Write { count, .. } if cmd.accepted => writes += count,
                SedOp::Write { .. } => {}
                op => self
                    .transcript
                    .push(format!("sed\t{op:?}\t{}", if cmd.accepted { "ok" } else { "rejected" })),
            }
        }
        self.transcript.push(format!("sed\tsectors_written\t{writes}"));
        self.transcript.extend(notes);
        match &fault {
            Some(msg) => self.transcript.push(format!("fault\t{msg}")),
            None => self.transcript.push("end\tok".to_owned()),
        }

        Ok(SessionOutcome { record, result })
    }
}
