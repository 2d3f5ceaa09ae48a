//! The assembled machine: platform, host, time authority, and a
//! deterministic event scheduler.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::Digest;
use crate::host::{protected_region, recovery_mount, HostError, HostWorld, Schedule};
use crate::sed::{DeviceIdentity, DeviceSecrets, SedDevice};
use crate::tee::{PlatformState, ProgramImage, Platform, SessionOutcome, SessionRecord, TeeError, UiChannel};
use crate::timeauth::{TimeAuthority, TimeToken};
use crate::tpm::{SealedBlob, Tpm, TpmState};
use crate::updater::{
    genuine_image, FsGeometry, ProvisionArgs, SealedState, UpdatePolicy, UpdateReport, Updater, UpdaterError,
    UpdaterTask, SEALED_STATE_INDEX, UPDATER_IMAGE_BYTES,
};
use crate::vaultfs::{FsError, FsLayout, Region, DEFAULT_CLUSTER_SIZE};

/// Sector alignment of the protected region.
const REGION_ALIGN: u64 = 128;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Tee(#[from] TeeError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Updater(#[from] UpdaterError),
    #[error(transparent)]
    Fs(#[from] FsError),
}

/// Drive geometry: the original partition first, the protected one after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub original_clusters: u32,
    pub protected_clusters: u32,
    pub cluster_size: u32,
    pub dir_slots: u32,
    pub transition_cost: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            original_clusters: 2048,
            protected_clusters: 8192,
            cluster_size: DEFAULT_CLUSTER_SIZE,
            dir_slots: 1024,
            transition_cost: crate::tee::DEFAULT_TRANSITION_COST,
        }
    }
}

impl WorldConfig {
    pub fn original_region(&self) -> Region {
        let lay = FsLayout::new(self.original_clusters, self.cluster_size, self.dir_slots).expect("valid geometry");
        Region {
            base_lba: 0,
            sectors: lay.total_sectors(),
        }
    }

    pub fn protected_region(&self) -> Region {
        let lay = FsLayout::new(self.protected_clusters, self.cluster_size, self.dir_slots).expect("valid geometry");
        Region {
            base_lba: self.original_region().sectors.next_multiple_of(REGION_ALIGN),
            sectors: lay.total_sectors(),
        }
    }

    pub fn sector_count(&self) -> u64 {
        let p = self.protected_region();
        p.base_lba + p.sectors
    }

    pub fn geometry(&self) -> FsGeometry {
        FsGeometry {
            num_clusters: self.protected_clusters,
            cluster_size: self.cluster_size,
            dir_slots: self.dir_slots,
        }
    }
}

/// Everything needed to rebuild a [`World`] besides the disk image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub seed: u64,
    pub config: WorldConfig,
    pub platform: PlatformState,
    pub tpm: TpmState,
    pub device: DeviceSecrets,
    pub schedule: Schedule,
    pub driver_enabled: bool,
    pub attach_tokens: bool,
    #[serde(with = "crate::sed::hex32")]
    pub authority_seed: [u8; 32],
    #[serde(with = "crate::sed::hex32")]
    pub host_rng_seed: [u8; 32],
    pub host_rng_word_pos: u128,
}

pub struct World {
    pub platform: Platform,
    pub host: HostWorld,
    pub config: WorldConfig,
    /// Whether the OS driver attaches a fresh signed time to scheduled commits.
    pub attach_tokens: bool,
    seed: u64,
    authority: TimeAuthority,
    rng: ChaCha20Rng,
    reports: Vec<UpdateReport>,
    sessions: Vec<SessionRecord>,
    transcript: Vec<String>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("seed", &self.seed)
            .field("clock", &self.platform.clock())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl World {
    /// Factory-fresh machine with a formatted, empty original partition.
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self, WorldError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut sed = SedDevice::new(config.sector_count(), DeviceIdentity::generate(&mut rng));
        let tpm = Tpm::new(&mut rng);
        let platform_seed: [u8; 32] = rng.random();
        let authority = TimeAuthority::generate(&mut rng);
        let host = HostWorld::format(
            &mut sed,
            config.original_region(),
            config.original_clusters,
            config.cluster_size,
            config.dir_slots,
            Schedule::new(0, 0),
        )?;
        let mut platform = Platform::new(sed, tpm, platform_seed);
        platform.set_transition_cost(config.transition_cost)?;
        let host_seed: [u8; 32] = rng.random();
        Ok(Self {
            platform,
            host,
            config,
            attach_tokens: true,
            seed,
            authority,
            rng: ChaCha20Rng::from_seed(host_seed),
            reports: Vec::new(),
            sessions: Vec::new(),
            transcript: vec![format!("seed\t{seed}")],
        })
    }

    pub fn state(&self) -> WorldState {
        WorldState {
            seed: self.seed,
            config: self.config,
            platform: self.platform.state(),
            tpm: self.platform.tpm.state(),
            device: self.platform.sed.secrets(),
            schedule: self.host.schedule,
            driver_enabled: self.host.driver_enabled,
            attach_tokens: self.attach_tokens,
            authority_seed: self.authority.seed(),
            host_rng_seed: self.rng.get_seed(),
            host_rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rebuilds a world around an already imported drive.
    pub fn restore(state: &WorldState, sed: SedDevice) -> Result<Self, String> {
        let tpm = Tpm::from_state(&state.tpm)?;
        let host = HostWorld::mount(&sed, state.config.original_region(), state.schedule, state.driver_enabled)
            .map_err(|e| e.to_string())?;
        let platform = Platform::restore(sed, tpm, &state.platform);
        let mut rng = ChaCha20Rng::from_seed(state.host_rng_seed);
        rng.set_word_pos(state.host_rng_word_pos);
        Ok(Self {
            platform,
            host,
            config: state.config,
            attach_tokens: state.attach_tokens,
            seed: state.seed,
            authority: TimeAuthority::from_seed(state.authority_seed),
            rng,
            reports: Vec::new(),
            sessions: Vec::new(),
            transcript: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> u64 {
        self.platform.clock()
    }

    pub fn advance_time(&mut self, secs: u64) {
        let t = self.now() + secs;
        self.set_time(t);
    }

    /// Moves the clock to `t`; earlier times are ignored.
    pub fn set_time(&mut self, t: u64) {
        self.platform.advance_to(t);
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn random_bytes(&mut self, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.rng.fill_bytes(&mut v);
        v
    }

    pub fn reports(&self) -> &[UpdateReport] {
        &self.reports
    }

    pub fn sessions(&self) -> &[SessionRecord] {
        &self.sessions
    }

    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<String> {
        std::mem::take(&mut self.transcript)
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.transcript.push(line.into());
    }

    pub fn authority_key(&self) -> crate::timeauth::AuthorityKey {
        self.authority.public_key()
    }

    /// A genuine signed time from the authority.
    pub fn issue_token(&mut self, time: u64) -> TimeToken {
        self.authority.issue(time, &mut self.rng)
    }

    pub fn app_write(&mut self, name: &str, bytes: &[u8]) -> Result<(), HostError> {
        let now = self.now();
        self.app_write_at(name, bytes, now)
    }

    pub fn app_write_at(&mut self, name: &str, bytes: &[u8], at: u64) -> Result<(), HostError> {
        self.host.app_write(&mut self.platform, name, bytes, at)
    }

    pub fn app_autosave_storm(&mut self, name: &str, bytes: &[u8], count: u32) -> Result<(), HostError> {
        let now = self.now();
        self.host.app_autosave_storm(&mut self.platform, name, bytes, count, now)
    }

    pub fn delete_original(&mut self, name: &str) -> Result<(), HostError> {
        let now = self.now();
        self.host.delete(&mut self.platform, name, now)
    }

    pub fn read_original(&mut self, name: &str) -> Result<Vec<u8>, HostError> {
        self.host.read(&self.platform.sed, name)
    }

    /// Late-launches an updater image built from `image_bytes`.
    pub fn launch_updater(
        &mut self,
        image_bytes: Vec<u8>,
        task: UpdaterTask,
        ui: &mut dyn UiChannel,
    ) -> Result<SessionOutcome<UpdateReport, UpdaterError>, WorldError> {
        let mut image = ProgramImage::new("trusted-updater", image_bytes, Updater { task });
        self.launch(&mut image, ui)
    }

    fn launch(
        &mut self,
        image: &mut ProgramImage<Updater>,
        ui: &mut dyn UiChannel,
    ) -> Result<SessionOutcome<UpdateReport, UpdaterError>, WorldError> {
        let now = self.now();
        let outcome = self.platform.late_launch(image, ui, now)?;
        self.transcript.extend(self.platform.take_transcript());
        self.host.refresh(&self.platform.sed)?;
        self.sessions.push(outcome.record.clone());
        if let Ok(report) = &outcome.result {
            self.reports.push(report.clone());
        }
        Ok(outcome)
    }

    fn run_genuine(&mut self, task: UpdaterTask, ui: &mut dyn UiChannel) -> Result<UpdateReport, WorldError> {
        let mut image = genuine_image(task);
        Ok(self.launch(&mut image, ui)?.result?)
    }

    pub fn provision(&mut self, policy: UpdatePolicy, ui: &mut dyn UiChannel) -> Result<UpdateReport, WorldError> {
        let interval = policy.commit_interval;
        let args = ProvisionArgs {
            policy,
            ntp_key: self.authority.public_key(),
            original: self.config.original_region(),
            protected: self.config.protected_region(),
            geometry: self.config.geometry(),
        };
        let report = self.run_genuine(UpdaterTask::Provision(args), ui)?;
        self.host.schedule = Schedule::new(interval, self.now());
        Ok(report)
    }

    pub fn commit(&mut self, token: Option<TimeToken>, ui: &mut dyn UiChannel) -> Result<UpdateReport, WorldError> {
        self.run_genuine(UpdaterTask::Commit { token }, ui)
    }

    /// Commit with a fresh authority token when the driver attaches them.
    pub fn commit_now(&mut self, ui: &mut dyn UiChannel) -> Result<UpdateReport, WorldError> {
        let token = self.attach_tokens.then(|| {
            let now = self.now();
            self.issue_token(now)
        });
        self.commit(token, ui)
    }

    pub fn browse_delete(&mut self, ui: &mut dyn UiChannel) -> Result<UpdateReport, WorldError> {
        self.run_genuine(UpdaterTask::BrowseDelete, ui)
    }

    pub fn auto_delete(&mut self, token: Option<TimeToken>, ui: &mut dyn UiChannel) -> Result<UpdateReport, WorldError> {
        self.run_genuine(UpdaterTask::AutoDelete { token }, ui)
    }

    /// Fires a due scheduled or manual commit, if any.
    pub fn tick(&mut self, ui: &mut dyn UiChannel) -> Option<Result<UpdateReport, WorldError>> {
        let now = self.now();
        self.host.tick(now)?;
        Some(self.commit_now(ui))
    }

    pub fn request_manual_commit(&mut self) {
        self.host.schedule.request_manual();
    }

    pub fn protected_region(&self) -> Option<Region> {
        protected_region(&self.platform.sed)
    }

    /// Digest of the protected region's raw sectors.
    pub fn protected_digest(&self) -> Digest {
        let r = self.config.protected_region();
        self.platform
            .sed
            .range_digest(r.base_lba, r.sectors)
            .expect("protected region is in bounds")
    }

    /// Every readable protected entry (live and hidden) with its content digest.
    pub fn protected_inventory(&self) -> Result<BTreeMap<String, Digest>, HostError> {
        use sha2::Digest as _;
        let view = recovery_mount(&self.platform.sed)?;
        let mut out = BTreeMap::new();
        for e in view.list(true) {
            let bytes = view.read_file(&e.name)?;
            out.insert(e.name, sha2::Sha256::digest(&bytes).into());
        }
        Ok(out)
    }

    /// Ground-truth sealed state, for scoring only.
    pub fn evaluator_sealed_state(&self) -> Option<SealedState> {
        let raw = self.platform.tpm.evaluator_nvram(SEALED_STATE_INDEX)?;
        let blob = SealedBlob::from_bytes(raw).ok()?;
        let plain = self.platform.tpm.evaluator_open(&blob).ok()?;
        SealedState::from_json(&plain).ok()
    }

    pub fn genuine_image_bytes() -> &'static [u8] {
        UPDATER_IMAGE_BYTES
    }
}

/// Events understood by [`EventQueue`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    HostWrite { name: String, bytes: Vec<u8> },
    HostDelete { name: String },
    LaunchGenuine,
    LaunchTampered,
    Tick,
}

/// Totally ordered by `(time, insertion order)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, SimEvent>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, at: u64, event: SimEvent) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.events.insert(seq, event);
    }

    pub fn pop(&mut self) -> Option<(u64, SimEvent)> {
        let Reverse((at, seq)) = self.heap.pop()?;
        Some((at, self.events.remove(&seq).expect("queued event")))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunLog {
    pub host_accepted: u64,
    /// Host events refused inside a session window and re-queued at its end.
    pub host_deferred: u64,
    pub sessions: u64,
    pub unseal_failures: u64,
}

impl World {
    /// Drains `queue`. Host events that land inside a session window are
    /// deferred to the window's end.
    pub fn run_events(&mut self, queue: &mut EventQueue, ui: &mut dyn UiChannel) -> Result<RunLog, WorldError> {
        let mut log = RunLog::default();
        while let Some((at, event)) = queue.pop() {
            let host_result = match &event {
                SimEvent::HostWrite { name, bytes } => Some(self.app_write_at(name, bytes, at)),
                SimEvent::HostDelete { name } => Some(
                    self.platform
                        .host_event(at, &format!("delete {name}"))
                        .map_err(HostError::from)
                        .and_then(|()| {
                            let now = self.now();
                            self.host.delete(&mut self.platform, name, now).or_else(|e| match e {
                                HostError::Fs(FsError::NotFound(_)) => Ok(()),
                                e => Err(e),
                            })
                        }),
                ),
                SimEvent::LaunchGenuine | SimEvent::LaunchTampered => {
                    self.set_time(at);
                    let mut bytes = UPDATER_IMAGE_BYTES.to_vec();
                    if event == SimEvent::LaunchTampered {
                        bytes.push(b'!');
                    }
                    let out = self.launch_updater(bytes, UpdaterTask::Commit { token: None }, ui)?;
                    log.sessions += 1;
                    if matches!(out.result, Err(UpdaterError::UnsealFailed(_))) {
                        log.unseal_failures += 1;
                    }
                    None
                }
                SimEvent::Tick => {
                    self.set_time(at);
                    if let Some(r) = self.tick(ui) {
                        r?;
                        log.sessions += 1;
                    }
                    None
                }
            };
            match host_result {
                Some(Ok(())) => log.host_accepted += 1,
                Some(Err(HostError::Suspended(TeeError::WorldSuspended))) => {
                    log.host_deferred += 1;
                    queue.push(self.now(), event);
                }
                Some(Err(e)) => return Err(e.into()),
                None => {}
            }
        }
        Ok(log)
    }
}
