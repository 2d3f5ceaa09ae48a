mod common;

use proptest::prelude::*;
use sealvault::tpm::{Locality, PcrBinding, SealedBlob, Tpm, TpmError, DYNAMIC_PCRS, LAUNCH_PCR};

#[test]
fn seal_and_nvram_follow_the_truth_table() {
    let (d, successes) = common::seal_truth_table(11, 400);
    assert!(d.is_empty(), "{d:#?}");
    // Both outcomes must actually occur for the table to mean anything.
    assert!(successes > 50 && successes < 350, "{successes}");
}

#[test]
fn host_cannot_touch_dynamic_registers() {
    let mut tpm = Tpm::with_root_secret([1; 32]);
    for i in DYNAMIC_PCRS {
        assert_eq!(tpm.pcr_extend_from(Locality::Host, i, &[0; 32]), Err(TpmError::LocalityDenied(i)));
        assert_eq!(tpm.reset_dynamic(Locality::Host, i), Err(TpmError::LocalityDenied(i)));
    }
    assert_eq!(tpm.reset_dynamic(Locality::LateLaunch, 3), Err(TpmError::LocalityDenied(3)));
    assert!(tpm.pcr_extend_from(Locality::Host, 3, &[0; 32]).is_ok());
}

#[test]
fn tampered_blobs_never_open() {
    let mut tpm = Tpm::with_root_secret([2; 32]);
    tpm.pcr_extend(LAUNCH_PCR, &[5; 32]).unwrap();
    let b = tpm.bind_current(&[LAUNCH_PCR]).unwrap();
    let blob = tpm.seal(b"credential", &b).unwrap();
    let bytes = blob.to_bytes();
    for i in 0..bytes.len() {
        let mut t = bytes.clone();
        t[i] ^= 0x01;
        if let Ok(blob) = SealedBlob::from_bytes(&t) {
            assert!(tpm.unseal(&blob).is_err(), "flip at {i} still opened");
        }
    }
    // Rebinding the same ciphertext to a satisfiable policy does not help.
    let mut rebound = blob.clone();
    rebound.bindings = vec![PcrBinding { index: 0, expected: [0; 32] }];
    rebound.policy_digest = sealvault::tpm::policy_digest(&rebound.bindings);
    assert_eq!(tpm.unseal(&rebound), Err(TpmError::CorruptBlob));
}

proptest! {
    #[test]
    fn extend_matches_hash_chain(ms in proptest::collection::vec(any::<[u8; 32]>(), 0..12)) {
        let mut tpm = Tpm::with_root_secret([0; 32]);
        for m in &ms {
            tpm.pcr_extend(LAUNCH_PCR, m).unwrap();
        }
        prop_assert_eq!(tpm.pcr(LAUNCH_PCR).unwrap(), common::chain([0; 32], &ms));
    }

    #[test]
    fn distinct_sequences_give_distinct_values(
        a in proptest::collection::vec(any::<[u8; 32]>(), 1..6),
        b in proptest::collection::vec(any::<[u8; 32]>(), 1..6),
    ) {
        prop_assume!(a != b);
        let run = |ms: &[[u8; 32]]| {
            let mut t = Tpm::with_root_secret([0; 32]);
            for m in ms {
                t.pcr_extend_from(Locality::Host, 4, m).unwrap();
            }
            t.pcr(4).unwrap()
        };
        prop_assert_ne!(run(&a), run(&b));
    }

    #[test]
    fn unseal_inverts_seal(p in proptest::collection::vec(any::<u8>(), 1..200), m in any::<[u8; 32]>()) {
        let mut tpm = Tpm::with_root_secret([3; 32]);
        tpm.pcr_extend(LAUNCH_PCR, &m).unwrap();
        let b = tpm.bind_current(&[LAUNCH_PCR, 0]).unwrap();
        let blob = tpm.seal(&p, &b).unwrap();
        prop_assert_eq!(tpm.unseal(&blob).unwrap(), p);
        tpm.reset_on_boot();
        prop_assert_eq!(tpm.unseal(&blob), Err(TpmError::PolicyMismatch));
    }
}
