mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sealvault::block::{SectorRead, SectorWrite, SECTOR_SIZE};
use sealvault::sed::{Credential, DeviceIdentity, SedDevice};

#[test]
fn matches_reference_model_on_random_sequences() {
    for seed in 0..5 {
        let d = common::sed_differential(seed, 2_000);
        assert!(d.is_empty(), "seed {seed}: {d:#?}");
    }
}

fn provisioned() -> (SedDevice, Credential) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let id = DeviceIdentity::generate(&mut rng);
    let msid = id.msid.clone();
    let mut dev = SedDevice::new(64, id);
    let cred = Credential::random(&mut rng);
    dev.configure_range(&msid, 16, 32, true, false, &cred).unwrap();
    (dev, cred)
}

#[derive(Debug, Clone)]
enum Cmd {
    Write(u64, u8, u8),
    Read(u64, u8),
    Unlock(bool),
    Lock(bool),
    Relock,
}

fn cmd() -> impl Strategy<Value = Cmd> {
    prop_oneof![
        (0u64..70, 0u8..5, any::<u8>()).prop_map(|(l, c, b)| Cmd::Write(l, c, b)),
        (0u64..70, 0u8..5).prop_map(|(l, c)| Cmd::Read(l, c)),
        any::<bool>().prop_map(Cmd::Unlock),
        any::<bool>().prop_map(Cmd::Lock),
        Just(Cmd::Relock),
    ]
}

proptest! {
    #[test]
    fn locked_sectors_never_change(cmds in proptest::collection::vec(cmd(), 1..60)) {
        let (mut dev, cred) = provisioned();
        let wrong = Credential([9; 32]);
        let mut last_lock_verb = true;
        for c in cmds {
            let locked = dev.range(1).unwrap().write_locked;
            let protected = dev.range_digest(16, 32).unwrap();
            let whole = dev.digest();
            match c {
                Cmd::Write(lba, count, byte) => {
                    let ok = dev.write_sectors(lba, &vec![byte; count as usize * SECTOR_SIZE]).is_ok();
                    let touches = count > 0 && lba < 48 && 16 < lba + count as u64;
                    if !ok {
                        prop_assert_eq!(dev.digest(), whole);
                    }
                    if locked && touches {
                        prop_assert!(!ok);
                        prop_assert_eq!(dev.range_digest(16, 32).unwrap(), protected);
                    }
                }
                Cmd::Read(lba, count) => {
                    let _ = dev.read_sectors(lba, count as u64);
                    prop_assert_eq!(dev.digest(), whole);
                }
                Cmd::Unlock(right) => {
                    if dev.unlock_write(1, if right { &cred } else { &wrong }).is_ok() {
                        last_lock_verb = false;
                    }
                }
                Cmd::Lock(right) => {
                    if dev.lock_write(1, if right { &cred } else { &wrong }).is_ok() {
                        last_lock_verb = true;
                    }
                }
                Cmd::Relock => {
                    dev.relock_all();
                    last_lock_verb = true;
                }
            }
            prop_assert_eq!(dev.range(1).unwrap().write_locked, last_lock_verb);
            // Reads stay open: the protected range has read locking disabled.
            prop_assert!(dev.read_sectors(16, 32).is_ok());
            for r in dev.ranges() {
                prop_assert!(r.write_lock_enabled || !r.write_locked);
                prop_assert!(r.read_lock_enabled || !r.read_locked);
            }
        }
    }

    #[test]
    fn ranges_never_overlap(spans in proptest::collection::vec((0u64..64, 1u64..20), 1..12)) {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let id = DeviceIdentity::generate(&mut rng);
        let msid = id.msid.clone();
        let mut dev = SedDevice::new(64, id);
        for (s, l) in spans {
            let _ = dev.configure_range(&msid, s, l, true, false, &msid);
        }
        let rs = dev.ranges();
        for (i, a) in rs.iter().enumerate() {
            prop_assert!(a.end_lba() <= 64);
            for b in &rs[i + 1..] {
                prop_assert!(a.end_lba() <= b.start_lba || b.end_lba() <= a.start_lba);
            }
        }
    }
}
