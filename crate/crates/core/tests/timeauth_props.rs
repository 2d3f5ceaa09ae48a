mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sealvault::timeauth::{verify, TimeAuthority, TimeToken};

proptest! {
    #[test]
    fn accepted_times_strictly_increase(times in proptest::collection::vec(0u64..50, 1..40), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ta = TimeAuthority::generate(&mut rng);
        let key = ta.public_key();
        let mut last = None;
        let mut accepted = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            let tok = ta.issue(t, &mut rng);
            // Purity: the same inputs give the same answer.
            prop_assert_eq!(verify(&tok, &key, last), verify(&tok, &key, last));
            if let Ok(v) = verify(&tok, &key, last) {
                last = Some(v);
                accepted.push(i);
            }
        }
        prop_assert_eq!(accepted, common::monotonic_accepts(&times));
    }

    #[test]
    fn encodings_round_trip_and_tampering_fails(t in any::<u64>(), flip in 0usize..88, bit in 0u8..8) {
        let mut rng = ChaCha20Rng::seed_from_u64(t);
        let ta = TimeAuthority::generate(&mut rng);
        let tok = ta.issue(t, &mut rng);
        prop_assert_eq!(TimeToken::from_bytes(&tok.to_bytes()).unwrap(), tok.clone());
        prop_assert_eq!(TimeToken::from_hex(&tok.to_hex()).unwrap(), tok.clone());
        let mut b = tok.to_bytes();
        b[flip] ^= 1 << bit;
        if let Ok(bad) = TimeToken::from_bytes(&b) {
            prop_assert!(verify(&bad, &ta.public_key(), None).is_err());
        }
    }
}
