//! Independent oracles shared by the integration tests. None of these call
//! into the crate's own decision logic; they restate the rules directly.

#![allow(dead_code)]

use sha2::{Digest, Sha256};

pub const SECTOR: usize = 512;

/// Brute-force model of the drive's permission rules: dense sectors, plain
/// credential comparison, per-sector lock lookup.
#[derive(Clone)]
pub struct RefSed {
    pub sectors: Vec<[u8; SECTOR]>,
    pub ranges: Vec<RefRange>,
    pub admin: [u8; 32],
    pub msid: [u8; 32],
    pub psid: [u8; 32],
    pub next_id: u32,
}

#[derive(Clone, Debug)]
pub struct RefRange {
    pub id: u32,
    pub start: u64,
    pub len: u64,
    pub wle: bool,
    pub rle: bool,
    pub wl: bool,
    pub rl: bool,
    pub cred: [u8; 32],
}

impl RefSed {
    pub fn new(count: u64, msid: [u8; 32], psid: [u8; 32]) -> Self {
        Self {
            sectors: vec![[0; SECTOR]; count as usize],
            ranges: Vec::new(),
            admin: msid,
            msid,
            psid,
            next_id: 1,
        }
    }

    fn in_bounds(&self, lba: u64, count: u64) -> bool {
        lba.checked_add(count).is_some_and(|end| end <= self.sectors.len() as u64)
    }

    pub fn configure(&mut self, admin: [u8; 32], start: u64, len: u64, wle: bool, rle: bool, cred: [u8; 32]) -> bool {
        if admin != self.admin || len == 0 || !self.in_bounds(start, len) {
            return false;
        }
        // Overlap checked sector by sector.
        for s in start..start + len {
            if self.ranges.iter().any(|r| s >= r.start && s < r.start + r.len) {
                return false;
            }
        }
        self.ranges.push(RefRange {
            id: self.next_id,
            start,
            len,
            wle,
            rle,
            wl: wle,
            rl: rle,
            cred,
        });
        self.next_id += 1;
        true
    }

    pub fn change_admin(&mut self, old: [u8; 32], new: [u8; 32]) -> bool {
        if old != self.admin {
            return false;
        }
        self.admin = new;
        true
    }

    /// `write`/`locked` select one of the four lock verbs.
    pub fn set_lock(&mut self, id: u32, cred: [u8; 32], write: bool, locked: bool) -> bool {
        let Some(r) = self.ranges.iter_mut().find(|r| r.id == id) else {
            return false;
        };
        if r.cred != cred {
            return false;
        }
        if write {
            r.wl = locked && r.wle;
        } else {
            r.rl = locked && r.rle;
        }
        true
    }

    pub fn relock(&mut self) {
        for r in &mut self.ranges {
            r.wl = r.wle;
            r.rl = r.rle;
        }
    }

    pub fn psid_revert(&mut self, psid: [u8; 32]) -> bool {
        if psid != self.psid {
            return false;
        }
        self.ranges.clear();
        self.sectors.iter_mut().for_each(|s| *s = [0; SECTOR]);
        self.admin = self.msid;
        self.next_id = 1;
        true
    }

    fn sector_write_locked(&self, s: u64) -> bool {
        self.ranges.iter().any(|r| r.wl && s >= r.start && s < r.start + r.len)
    }

    fn sector_read_locked(&self, s: u64) -> bool {
        self.ranges.iter().any(|r| r.rl && s >= r.start && s < r.start + r.len)
    }

    pub fn write(&mut self, lba: u64, data: &[u8]) -> bool {
        if data.len() % SECTOR != 0 {
            return false;
        }
        let count = (data.len() / SECTOR) as u64;
        if !self.in_bounds(lba, count) || (lba..lba + count).any(|s| self.sector_write_locked(s)) {
            return false;
        }
        for (i, chunk) in data.chunks(SECTOR).enumerate() {
            self.sectors[lba as usize + i].copy_from_slice(chunk);
        }
        true
    }

    pub fn read(&self, lba: u64, count: u64) -> Option<Vec<u8>> {
        if !self.in_bounds(lba, count) || (lba..lba + count).any(|s| self.sector_read_locked(s)) {
            return None;
        }
        Some(self.sectors[lba as usize..(lba + count) as usize].concat())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for s in &self.sectors {
            h.update(s);
        }
        h.finalize().into()
    }
}

/// Hash-chain register: SHA-256(old || measurement), restated.
pub fn chain(start: [u8; 32], measurements: &[[u8; 32]]) -> [u8; 32] {
    measurements.iter().fold(start, |acc, m| {
        let mut h = Sha256::new();
        h.update(acc);
        h.update(m);
        h.finalize().into()
    })
}

/// Probes of the full-traversal allocator: every one of `k` single-cluster
/// allocations scans all `n` table entries.
pub fn naive_probe_oracle(k: u64, n: u64) -> u64 {
    (0..k).map(|_| n).sum()
}

/// Indices accepted by a strictly monotonic verifier: each time must exceed
/// the largest one accepted so far.
pub fn monotonic_accepts(times: &[u64]) -> Vec<usize> {
    let mut best: Option<u64> = None;
    let mut out = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        if best.is_none_or(|b| t > b) {
            best = Some(t);
            out.push(i);
        }
    }
    out
}

/// Drives the real drive and [`RefSed`] with the same random command stream
/// and returns every disagreement found (decisions, reads, final digest).
pub fn sed_differential(seed: u64, ops: usize) -> Vec<String> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use sealvault::block::{SectorRead, SectorWrite};
    use sealvault::sed::{Credential, DeviceIdentity, SedDevice};

    const COUNT: u64 = 96;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let identity = DeviceIdentity::generate(&mut rng);
    let (msid, psid) = (identity.msid.0, identity.psid.0);
    let mut dev = SedDevice::new(COUNT, identity);
    let mut model = RefSed::new(COUNT, msid, psid);
    // A small credential pool makes both matches and mismatches common.
    let mut pool: Vec<[u8; 32]> = vec![msid, psid, [0; 32]];
    for _ in 0..3 {
        pool.push(rng.random());
    }
    let mut diverged = Vec::new();
    for step in 0..ops {
        let pick = |rng: &mut ChaCha20Rng, pool: &[[u8; 32]]| pool[rng.random_range(0..pool.len())];
        let op = rng.random_range(0..100);
        let (what, real, want) = match op {
            0..=7 => {
                let admin = if rng.random_bool(0.7) { model.admin } else { pick(&mut rng, &pool) };
                let start = rng.random_range(0..COUNT + 4);
                let len = rng.random_range(0..24);
                let (wle, rle) = (rng.random_bool(0.8), rng.random_bool(0.3));
                let cred = pick(&mut rng, &pool);
                let real = dev
                    .configure_range(&Credential(admin), start, len, wle, rle, &Credential(cred))
                    .is_ok();
                ("configure", real, model.configure(admin, start, len, wle, rle, cred))
            }
            8..=10 => {
                let old = if rng.random_bool(0.5) { model.admin } else { pick(&mut rng, &pool) };
                let new = pick(&mut rng, &pool);
                let real = dev.change_admin(&Credential(old), &Credential(new)).is_ok();
                ("change_admin", real, model.change_admin(old, new))
            }
            11..=40 => {
                let id = rng.random_range(0..model.next_id + 1);
                let cred = match model.ranges.iter().find(|r| r.id == id) {
                    Some(r) if rng.random_bool(0.6) => r.cred,
                    _ => pick(&mut rng, &pool),
                };
                let (write, locked) = (rng.random_bool(0.7), rng.random_bool(0.5));
                let c = Credential(cred);
                let real = match (write, locked) {
                    (true, false) => dev.unlock_write(id, &c),
                    (true, true) => dev.lock_write(id, &c),
                    (false, false) => dev.unlock_read(id, &c),
                    (false, true) => dev.lock_read(id, &c),
                }
                .is_ok();
                ("lock verb", real, model.set_lock(id, cred, write, locked))
            }
            41..=75 => {
                let lba = rng.random_range(0..COUNT + 2);
                let count = rng.random_range(0..6u64);
                let mut data = vec![0u8; count as usize * SECTOR];
                rng.fill(&mut data[..]);
                if rng.random_bool(0.02) {
                    data.push(1);
                }
                let real = dev.write_sectors(lba, &data).is_ok();
                ("write", real, model.write(lba, &data))
            }
            76..=90 => {
                let lba = rng.random_range(0..COUNT + 2);
                let count = rng.random_range(0..6u64);
                let before = dev.digest();
                let real = dev.read_sectors(lba, count).ok();
                let want = model.read(lba, count);
                if dev.digest() != before {
                    diverged.push(format!("step {step}: read mutated the device"));
                }
                if real != want {
                    diverged.push(format!("step {step}: read {lba}+{count} returned different bytes"));
                }
                ("read", real.is_some(), want.is_some())
            }
            91..=95 => {
                dev.relock_all();
                model.relock();
                ("relock", true, true)
            }
            96..=98 => {
                dev.power_cycle();
                model.relock();
                ("power_cycle", true, true)
            }
            _ => {
                let guess = if rng.random_bool(0.3) { psid } else { pick(&mut rng, &pool) };
                let real = dev.psid_revert(&Credential(guess)).is_ok();
                ("psid_revert", real, model.psid_revert(guess))
            }
        };
        if real != want {
            diverged.push(format!("step {step}: {what} accepted={real}, model says {want}"));
        }
    }
    // Compare SHA-256 over the raw medium, bypassing lock checks.
    let raw = dev.store().read_sectors(0, COUNT).expect("whole device");
    if <Sha256 as Digest>::digest(&raw).as_slice() != model.digest() {
        diverged.push("final sector digest differs".into());
    }
    diverged
}

/// Randomized (seal, optional drift, unseal) trials checked against a truth
/// table computed from independently tracked register values. NVRAM reads
/// under the same policy are checked alongside.
pub fn seal_truth_table(seed: u64, trials: usize) -> (Vec<String>, usize) {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use sealvault::tpm::{Locality, PcrBinding, Tpm, DYNAMIC_PCRS, PCR_COUNT};

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut diverged = Vec::new();
    let mut successes = 0;
    for trial in 0..trials {
        let mut tpm = Tpm::with_root_secret(rng.random());
        let mut model = [[0u8; 32]; PCR_COUNT];
        let extend = |tpm: &mut Tpm, model: &mut [[u8; 32]; PCR_COUNT], rng: &mut ChaCha20Rng| {
            let i = rng.random_range(0..PCR_COUNT);
            let m: [u8; 32] = rng.random();
            // Dynamic registers only move from the late-launch locality.
            let loc = if DYNAMIC_PCRS.contains(&i) { Locality::LateLaunch } else { Locality::Host };
            tpm.pcr_extend_from(loc, i, &m).expect("allowed locality");
            model[i] = chain(model[i], &[m]);
        };
        for _ in 0..rng.random_range(0..6) {
            extend(&mut tpm, &mut model, &mut rng);
        }
        let mut idx: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..PCR_COUNT)).collect();
        idx.sort_unstable();
        idx.dedup();
        let bindings: Vec<PcrBinding> = idx
            .iter()
            .map(|&i| PcrBinding {
                index: i as u8,
                // Mostly the current value; sometimes a value never reached.
                expected: if rng.random_bool(0.85) { model[i] } else { rng.random() },
            })
            .collect();
        let secret: Vec<u8> = (0..rng.random_range(1..64)).map(|_| rng.random()).collect();
        let blob = tpm.seal(&secret, &bindings).expect("seal");
        let satisfied = |model: &[[u8; 32]; PCR_COUNT]| bindings.iter().all(|b| model[b.index as usize] == b.expected);
        tpm.nvram_define(0x10, bindings.clone()).expect("define");
        let wrote = tpm.nvram_write(0x10, &secret).is_ok();
        if wrote != satisfied(&model) {
            diverged.push(format!("trial {trial}: nvram write gate disagrees"));
        }

        match rng.random_range(0..5) {
            0 => {}
            1 | 2 => {
                for _ in 0..rng.random_range(1..3) {
                    extend(&mut tpm, &mut model, &mut rng);
                }
            }
            3 => {
                tpm.reset_on_boot();
                model = [[0; 32]; PCR_COUNT];
            }
            _ => {
                let i = rng.random_range(DYNAMIC_PCRS);
                tpm.reset_dynamic(Locality::LateLaunch, i).expect("late launch may reset");
                model[i] = [0; 32];
            }
        }

        let want = satisfied(&model);
        match tpm.unseal(&blob) {
            Ok(p) if want && p == secret => successes += 1,
            Ok(_) if want => diverged.push(format!("trial {trial}: unseal returned wrong bytes")),
            Ok(_) => diverged.push(format!("trial {trial}: unseal succeeded under a violated policy")),
            Err(e) if want => diverged.push(format!("trial {trial}: unseal failed under a satisfied policy: {e}")),
            Err(_) => {}
        }
        let read = tpm.nvram_read(0x10);
        if read.is_ok() != want {
            diverged.push(format!("trial {trial}: nvram read gate disagrees"));
        }
        if tpm.nvram_read(0x11).is_ok() {
            diverged.push(format!("trial {trial}: undefined slot readable"));
        }
    }
    (diverged, successes)
}
