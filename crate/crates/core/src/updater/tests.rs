use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::sed::{DeviceIdentity, SedDevice, SedOp};
use crate::tee::{Platform, ScriptedUi};
use crate::timeauth::TimeAuthority;
use crate::tpm::Tpm;
use crate::vaultfs::DirEntry;

const ORIGINAL: Region = Region { base_lba: 0, sectors: 16384 };
const PROTECTED: Region = Region { base_lba: 16384, sectors: 8192 };
const GEOMETRY: FsGeometry = FsGeometry { num_clusters: 900, cluster_size: 4096, dir_slots: 256 };

struct Fixture {
    platform: Platform,
    authority: TimeAuthority,
    rng: ChaCha20Rng,
    original: FsImage,
}

impl Fixture {
    fn new() -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut sed = SedDevice::new(ORIGINAL.sectors + PROTECTED.sectors, DeviceIdentity::generate(&mut rng));
        let tpm = Tpm::new(&mut rng);
        let original = FsImage::format_with(&mut sed, ORIGINAL, 1800, 4096, 128).unwrap();
        let authority = TimeAuthority::generate(&mut rng);
        Self {
            platform: Platform::new(sed, tpm, [3; 32]),
            authority,
            rng,
            original,
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) {
        let now = self.platform.clock();
        let dev = &mut self.platform.sed;
        if self.original.lookup(name).is_some() {
            self.original.overwrite(dev, name, bytes, now).unwrap();
        } else {
            self.original.create_write(dev, name, bytes, now, AllocPolicy::Cursor).unwrap();
        }
    }

    fn advance(&mut self, secs: u64) {
        let t = self.platform.clock() + secs;
        self.platform.advance_to(t);
    }

    fn run(&mut self, image_bytes: &[u8], task: UpdaterTask, ui: &mut ScriptedUi) -> Result<UpdateReport, UpdaterError> {
        let mut image = ProgramImage::new("updater", image_bytes.to_vec(), Updater { task });
        let now = self.platform.clock();
        let out = self.platform.late_launch(&mut image, ui, now).unwrap();
        self.original = FsImage::mount(&self.platform.sed, ORIGINAL).unwrap();
        out.result
    }

    fn genuine(&mut self, task: UpdaterTask) -> Result<UpdateReport, UpdaterError> {
        self.run(UPDATER_IMAGE_BYTES, task, &mut ScriptedUi::default())
    }

    fn provision(&mut self, policy: UpdatePolicy) -> UpdateReport {
        let args = ProvisionArgs {
            policy,
            ntp_key: self.authority.public_key(),
            original: ORIGINAL,
            protected: PROTECTED,
            geometry: GEOMETRY,
        };
        self.genuine(UpdaterTask::Provision(args)).unwrap()
    }

    fn commit(&mut self, token: Option<TimeToken>) -> UpdateReport {
        self.genuine(UpdaterTask::Commit { token }).unwrap()
    }

    fn token(&mut self, time: u64) -> TimeToken {
        self.authority.issue(time, &mut self.rng)
    }

    fn protected(&self) -> FsImage {
        FsImage::mount(&self.platform.sed, PROTECTED).unwrap()
    }

    fn listing(&self) -> Vec<DirEntry> {
        self.protected().list(true)
    }

    fn read(&self, name: &str) -> Vec<u8> {
        self.protected().read_file(&self.platform.sed, name).unwrap()
    }
}

fn policy() -> UpdatePolicy {
    UpdatePolicy {
        commit_interval: 100,
        max_file_size: 50_000,
        version_limit: 3,
        age_threshold: 1000,
        anomaly_version_threshold: 100,
        avatar: "blue heron".into(),
    }
}

fn provisioned(files: &[(&str, &[u8])]) -> Fixture {
    let mut f = Fixture::new();
    f.advance(10);
    for (n, b) in files {
        f.write(n, b);
    }
    f.advance(10);
    f.provision(policy());
    f
}

fn names(entries: &[DirEntry]) -> Vec<(String, bool)> {
    entries.iter().map(|e| (e.name.clone(), e.hidden)).collect()
}

#[test]
fn version_names_round_trip() {
    assert_eq!(version_name("a.txt", 5, 0), "a.txt.000000000005");
    assert_eq!(version_name("a.txt", 5, 2), "a.txt.000000000005-2");
    assert_eq!(parse_version_name("a.txt.000000000005"), Some(("a.txt", 5, 0)));
    assert_eq!(parse_version_name("a.txt.000000000005-2"), Some(("a.txt", 5, 2)));
    assert_eq!(parse_version_name("a.txt"), None);
    assert_eq!(parse_version_name("a.00005"), None);
    assert_eq!(parse_version_name(".000000000005"), None);
    assert_eq!(parse_version_name("a.000000000005-0"), None);
}

#[test]
fn provision_copies_files_and_relocks() {
    let f = provisioned(&[("a", b"alpha"), ("b", b"beta"), ("c", b"gamma")]);
    assert_eq!(
        names(&f.listing()),
        [("a".into(), false), ("b".into(), false), ("c".into(), false)]
    );
    assert_eq!(f.read("b"), b"beta");
    assert!(f.platform.sed.ranges().iter().all(|r| r.write_locked && !r.read_locked));

    // Plaintext policy copy matches every public field; the avatar never
    // reaches the original partition.
    let mut orig = FsImage::mount(&f.platform.sed, ORIGINAL).unwrap();
    let text = String::from_utf8(orig.read_file(&f.platform.sed, POLICY_FILE_NAME).unwrap()).unwrap();
    assert_eq!(verify_policy(&policy(), Some(&text)), PolicyCheck::Ok);
    assert!(!text.contains("heron"));
}

#[test]
fn second_provision_is_refused() {
    let mut f = provisioned(&[("a", b"1")]);
    let args = ProvisionArgs {
        policy: policy(),
        ntp_key: f.authority.public_key(),
        original: ORIGINAL,
        protected: PROTECTED,
        geometry: GEOMETRY,
    };
    assert_eq!(f.genuine(UpdaterTask::Provision(args)).unwrap_err(), UpdaterError::AlreadyProvisioned);
}

#[test]
fn provision_without_room_touches_nothing() {
    let mut f = Fixture::new();
    let big = vec![1u8; 40_000];
    for i in 0..100 {
        f.write(&format!("f{i}"), &big);
    }
    let before = f.platform.sed.digest();
    let args = ProvisionArgs {
        policy: policy(),
        ntp_key: f.authority.public_key(),
        original: ORIGINAL,
        protected: PROTECTED,
        geometry: GEOMETRY,
    };
    assert!(matches!(f.genuine(UpdaterTask::Provision(args)), Err(UpdaterError::NoSpace { .. })));
    assert_eq!(f.platform.sed.digest(), before);
    assert!(f.platform.sed.ranges().is_empty());
}

#[test]
fn commit_versions_a_modified_file() {
    let mut f = provisioned(&[("a", b"v1"), ("b", b"keep")]);
    f.advance(50);
    f.write("a", b"v2");
    f.advance(50);
    let mut ui = ScriptedUi::default();
    let r = f.run(UPDATER_IMAGE_BYTES, UpdaterTask::Commit { token: None }, &mut ui).unwrap();
    assert_eq!(ui.output[0], banner_line("blue heron"));
    assert_eq!(r.committed.len(), 1);
    assert_eq!(r.committed[0].name, "a");
    assert_eq!(r.policy_check, Some(PolicyCheck::Ok));

    let listing = f.listing();
    let hidden: Vec<_> = listing.iter().filter(|e| e.hidden).collect();
    assert_eq!(hidden.len(), 1);
    let (base, ts, _) = parse_version_name(&hidden[0].name).unwrap();
    assert_eq!(base, "a");
    assert_eq!(f.read(&hidden[0].name), b"v1");
    assert_eq!(f.read("a"), b"v2");
    let live = listing.iter().find(|e| e.name == "a").unwrap();
    assert!(live.modified >= ts);
}

#[test]
fn nothing_changed_still_shows_banner() {
    let mut f = provisioned(&[("a", b"v1")]);
    f.advance(5);
    let mut ui = ScriptedUi::default();
    let r = f.run(UPDATER_IMAGE_BYTES, UpdaterTask::Commit { token: None }, &mut ui).unwrap();
    assert!(r.committed.is_empty());
    assert_eq!(ui.output[0], banner_line("blue heron"));
}

#[test]
fn deleted_originals_are_not_propagated() {
    let mut f = provisioned(&[("a", b"v1"), ("b", b"v1")]);
    f.advance(5);
    let now = f.platform.clock();
    f.original.delete(&mut f.platform.sed, "a").unwrap();
    let _ = now;
    f.advance(5);
    f.commit(None);
    assert_eq!(f.read("a"), b"v1");
}

#[test]
fn storm_yields_one_version_and_burst_is_flagged() {
    let mut f = provisioned(&[("doc", b"v0"), ("other", b"x")]);
    f.advance(10);
    for i in 0..100u32 {
        f.write("doc", &i.to_le_bytes());
    }
    f.advance(10);
    let r = f.commit(None);
    assert_eq!(r.committed.len(), 1);
    assert!(r.anomalies.is_empty());
    assert_eq!(f.listing().iter().filter(|e| e.hidden).count(), 1);
    assert_eq!(f.read("doc"), 99u32.to_le_bytes());

    f.advance(10);
    for i in 0..120u32 {
        f.write("other", &i.to_le_bytes());
    }
    f.advance(10);
    let r = f.commit(None);
    assert_eq!(r.anomalies.len(), 1);
    assert_eq!(r.anomalies[0].name, "other");
    assert!(r.anomalies[0].versions >= 120);
    assert_eq!(f.listing().iter().filter(|e| e.hidden).count(), 2);
}

#[test]
fn windowed_bursts_across_runs_are_flagged() {
    let mut f = provisioned(&[("doc", b"v0")]);
    let mut flagged_at = None;
    for run in 0..5 {
        f.advance(10);
        for i in 0..30u32 {
            f.write("doc", &i.to_le_bytes());
        }
        f.advance(10);
        if !f.commit(None).anomalies.is_empty() && flagged_at.is_none() {
            flagged_at = Some(run);
        }
    }
    // 30, 60, 90, 120: the fourth run crosses 100.
    assert_eq!(flagged_at, Some(3));
}

#[test]
fn oversize_files_are_skipped_and_retried() {
    let mut f = provisioned(&[("a", b"v1")]);
    f.advance(5);
    f.write("big", &vec![7u8; 60_000]);
    f.advance(5);
    let r = f.commit(None);
    assert!(r.committed.is_empty());
    assert_eq!(r.skipped.len(), 1);
    assert!(r.skipped[0].reason.contains("max_file_size"));
    f.advance(5);
    let r = f.commit(None);
    assert_eq!(r.skipped.len(), 1, "re-evaluated every run");

    f.advance(5);
    f.write("big", &vec![7u8; 10]);
    f.advance(5);
    let r = f.commit(None);
    assert_eq!(r.committed.len(), 1);
    assert!(r.skipped.is_empty());
    f.advance(5);
    assert!(f.commit(None).skipped.is_empty());
}

#[test]
fn no_space_keeps_committed_and_skips_rest() {
    let mut f = provisioned(&[("a", b"v1")]);
    f.advance(5);
    // 900 clusters of 4 KiB; each 40 000 byte file needs 10.
    let blob = vec![3u8; 40_000];
    for i in 0..95 {
        f.write(&format!("f{i:02}"), &blob);
    }
    f.advance(5);
    let r = f.commit(None);
    assert!(!r.committed.is_empty());
    assert!(!r.skipped.is_empty());
    assert!(r.skipped.iter().all(|s| s.reason == "no space"));
    assert_eq!(r.committed.len() + r.skipped.len(), 95);
    for c in &r.committed {
        assert_eq!(f.read(&c.name), blob);
    }
    assert!(f.platform.sed.ranges().iter().all(|r| r.write_locked));
}

#[test]
fn tampered_image_cannot_unseal_or_unlock() {
    let mut f = provisioned(&[("a", b"v1")]);
    f.platform.sed.clear_command_log();
    let mut tampered = UPDATER_IMAGE_BYTES.to_vec();
    tampered[0] ^= 1;
    let err = f
        .run(&tampered, UpdaterTask::Commit { token: None }, &mut ScriptedUi::default())
        .unwrap_err();
    assert!(matches!(err, UpdaterError::UnsealFailed(_)));
    assert!(!f
        .platform
        .sed
        .command_log()
        .iter()
        .any(|c| matches!(c.op, SedOp::UnlockWrite { .. })));
    // Genuine image still works afterwards.
    f.advance(5);
    f.commit(None);
}

#[test]
fn plaintext_edit_is_reported_but_sealed_policy_governs() {
    let mut f = provisioned(&[("a", b"v1")]);
    f.advance(5);
    let text = policy().to_plaintext().replace("max_file_size=50000", "max_file_size=1");
    f.write(POLICY_FILE_NAME, text.as_bytes());
    f.write("a", b"v2 is longer than one byte");
    f.advance(5);
    let r = f.commit(None);
    assert_eq!(r.policy_check, Some(PolicyCheck::Mismatch(vec!["max_file_size".into()])));
    assert_eq!(r.committed.len(), 1);

    f.advance(5);
    let now = f.platform.clock();
    f.original.delete(&mut f.platform.sed, POLICY_FILE_NAME).unwrap();
    let _ = now;
    let r = f.commit(None);
    assert_eq!(r.policy_check, Some(PolicyCheck::Mismatch(vec!["<missing>".into()])));
}

fn versions_of(f: &Fixture, base: &str) -> Vec<u64> {
    f.listing()
        .iter()
        .filter(|e| e.hidden)
        .filter_map(|e| parse_version_name(&e.name).filter(|(b, _, _)| *b == base).map(|(_, t, _)| t))
        .collect()
}

fn make_versions(f: &mut Fixture, base: &str, n: usize, gap: u64) {
    for i in 0..n {
        f.advance(gap);
        f.write(base, format!("{base}-{i}").as_bytes());
        f.advance(1);
        f.commit(None);
    }
}

#[test]
fn version_limit_keeps_newest() {
    let mut f = provisioned(&[("a", b"v0")]);
    // version_limit = 3 counts the live entry: two hidden versions remain.
    make_versions(&mut f, "a", 4, 10);
    let kept = versions_of(&f, "a");
    assert_eq!(kept.len(), 2);
    let hidden: Vec<_> = f.listing().into_iter().filter(|e| e.hidden).collect();
    assert_eq!(f.read(&hidden[1].name), b"a-2");
    assert_eq!(f.read("a"), b"a-3");
}

#[test]
fn aging_requires_a_verified_token() {
    let mut p = policy();
    p.version_limit = 100;
    let mut f = Fixture::new();
    f.advance(10);
    f.write("a", b"v0");
    f.advance(10);
    f.provision(p);
    make_versions(&mut f, "a", 2, 10);
    assert_eq!(versions_of(&f, "a").len(), 2);

    // Far beyond the threshold, but no token: nothing ages out.
    f.advance(5000);
    f.commit(None);
    assert_eq!(versions_of(&f, "a").len(), 2);

    // Forged time: a token from a different key is rejected and nothing is deleted.
    let rogue = TimeAuthority::generate(&mut f.rng);
    let forged = rogue.issue(1_000_000, &mut f.rng);
    let r = f.commit(Some(forged));
    assert!(matches!(r.time, TimeStatus::Rejected(_)));
    assert!(r.deletions.is_empty());
    assert_eq!(versions_of(&f, "a").len(), 2);

    let now = f.platform.clock();
    let t = f.token(now);
    let r = f.commit(Some(t.clone()));
    assert_eq!(r.time, TimeStatus::Verified(now));
    assert_eq!(r.deletions.len(), 2);
    assert!(r.deletions.iter().all(|d| d.cause == DeletionCause::Aging));
    assert_eq!(f.read("a"), b"a-1");

    // Replay is stale.
    let err = f.genuine(UpdaterTask::AutoDelete { token: Some(t) }).unwrap_err();
    assert!(matches!(err, UpdaterError::Time(TimeError::StaleToken { .. })));
}

#[test]
fn standalone_auto_delete_with_bad_token_deletes_nothing() {
    let mut f = provisioned(&[("a", b"v0")]);
    make_versions(&mut f, "a", 2, 10);
    let before = f.platform.sed.digest();
    let mut t = f.token(1_000_000);
    t.time += 1;
    let err = f.genuine(UpdaterTask::AutoDelete { token: Some(t) }).unwrap_err();
    assert_eq!(err, UpdaterError::Time(TimeError::BadSignature));
    assert_eq!(f.platform.sed.digest(), before);
}

#[test]
fn auto_delete_plan_properties() {
    let mk = |name: &str, hidden: bool| DirEntry {
        name: name.into(),
        size: 0,
        created: 0,
        modified: 0,
        first_cluster: None,
        hidden,
        deleted: false,
        generation: 0,
    };
    let entries = vec![
        mk("a", false),
        mk(&version_name("a", 10, 0), true),
        mk(&version_name("a", 20, 0), true),
        mk(&version_name("a", 20, 1), true),
        mk(&version_name("b", 5, 0), true),
    ];
    let mut p = policy();
    p.version_limit = 2;
    let plan = auto_delete_plan(&p, &entries, None);
    let deleted: Vec<_> = plan.iter().map(|d| d.name.as_str()).collect();
    assert_eq!(deleted, [version_name("a", 10, 0), version_name("a", 20, 0)]);
    p.version_limit = 1;
    // No live "b": one hidden version survives.
    assert!(!auto_delete_plan(&p, &entries, None)
        .iter()
        .any(|d| d.name == version_name("b", 5, 0)));

    p.version_limit = 100;
    p.age_threshold = 10;
    let plan = auto_delete_plan(&p, &entries, Some(25));
    assert_eq!(plan.len(), 2);
    assert!(plan.iter().all(|d| d.cause == DeletionCause::Aging));
    p.age_threshold = 0;
    assert!(auto_delete_plan(&p, &entries, Some(10_000)).is_empty());
}

#[test]
fn browse_delete_with_consent() {
    let mut f = provisioned(&[("a", b"1"), ("b", b"2"), ("c", b"3"), ("d", b"4"), ("e", b"5")]);
    let mut ui = ScriptedUi::from_script(" j \nn");
    let err = f.run(UPDATER_IMAGE_BYTES, UpdaterTask::BrowseDelete, &mut ui).unwrap_err();
    assert_eq!(err, UpdaterError::Aborted);
    assert_eq!(f.listing().len(), 5);

    let mut ui = ScriptedUi::from_script(" jj \ny");
    let r = f.run(UPDATER_IMAGE_BYTES, UpdaterTask::BrowseDelete, &mut ui).unwrap();
    assert_eq!(ui.output[0], banner_line("blue heron"));
    assert!(ui.output.iter().any(|l| l.contains('»')));
    assert_eq!(r.deletions.len(), 2);
    assert_eq!(names(&f.listing()), [("b".into(), false), ("d".into(), false), ("e".into(), false)]);
    assert!(f.platform.sed.ranges().iter().all(|r| r.write_locked));
}

#[test]
fn colliding_version_names_get_sequence_suffixes() {
    let mut dev = crate::block::SectorStore::new(2048);
    let region = Region { base_lba: 0, sectors: 2048 };
    let mut fs = FsImage::format_with(&mut dev, region, 100, 4096, 64).unwrap();
    for (i, t) in [7u64, 7, 7, 9].into_iter().enumerate() {
        store_version(&mut dev, &mut fs, "a", &[i as u8], t).unwrap();
    }
    let hidden: Vec<_> = fs.list(true).into_iter().filter(|e| e.hidden).map(|e| e.name).collect();
    assert_eq!(
        hidden,
        [version_name("a", 7, 0), version_name("a", 7, 1), version_name("a", 7, 2)]
    );
    assert_eq!(fs.read_file(&dev, &version_name("a", 7, 1)).unwrap(), [1]);
    assert_eq!(fs.read_file(&dev, "a").unwrap(), [3]);
}

#[test]
fn failed_store_restores_live_entry() {
    let mut dev = crate::block::SectorStore::new(2048);
    let region = Region { base_lba: 0, sectors: 2048 };
    let mut fs = FsImage::format_with(&mut dev, region, 4, 4096, 64).unwrap();
    store_version(&mut dev, &mut fs, "a", &[1; 8000], 1).unwrap();
    let err = store_version(&mut dev, &mut fs, "a", &[2; 12000], 2).unwrap_err();
    assert!(matches!(err, FsError::NoSpace { .. }));
    assert_eq!(names(&fs.list(true)), [("a".into(), false)]);
    assert_eq!(fs.read_file(&dev, "a").unwrap(), vec![1; 8000]);
}

#[test]
fn report_is_redacted_in_transcript() {
    let mut f = provisioned(&[("a", b"v1")]);
    let lines = f.platform.take_transcript().join("\n");
    assert!(lines.contains("report\tprovision"));
    assert!(!lines.contains("heron"));
}
