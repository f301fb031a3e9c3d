mod common;

use num_bigint::BigUint;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitfed_core::crypto::rsa::{self, extended_gcd, is_probable_prime, keypair_from_primes, mod_pow};
use splitfed_core::crypto::{accept_handshake, ClientHandshake, SessionCipher};

fn big(x: u64) -> BigUint {
    BigUint::from(x)
}

#[test]
fn textbook_example() {
    let (pk, sk) = keypair_from_primes(&big(61), &big(53), &big(17)).unwrap();
    assert_eq!(pk.n, big(3233));
    assert_eq!(sk.phi(), big(3120));
    assert_eq!(pk.e, big(17));
    assert_eq!(sk.d(), big(2753));
    // Independent oracles: num-bigint's own modpow and a plain integer check.
    assert_eq!(big(65).modpow(&big(17), &big(3233)), big(2790));
    assert_eq!((17u64 * 2753) % 3120, 1);
    let (g, x, _) = extended_gcd(&17.into(), &3120.into());
    assert_eq!(g, 1.into());
    assert_eq!(((x % 3120) + 3120) % 3120, 2753.into());

    assert_eq!(rsa::encrypt(&pk, &big(65)).unwrap(), big(2790));
    assert_eq!(rsa::decrypt(&sk, &big(2790)).unwrap(), big(65));
    assert_eq!(rsa::encrypt(&pk, &big(1)).unwrap(), big(1));
    assert!(rsa::encrypt(&pk, &big(0)).is_err());
    assert!(rsa::encrypt(&pk, &big(3233)).is_err());
}

#[test]
fn mod_pow_matches_library_modpow() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let m = rsa::random_message(&big(u64::MAX), &mut rng) + 2u32;
        let b = rsa::random_message(&(&m * &m), &mut rng);
        let e = rsa::random_message(&(&m * &m * &m), &mut rng);
        assert_eq!(mod_pow(&b, &e, &m), b.modpow(&e, &m));
    }
}

#[test]
fn miller_rabin_exhaustive_below_ten_thousand() {
    let truth = common::sieve(10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for n in 0..10_000u64 {
        assert_eq!(is_probable_prime(&big(n), rsa::MILLER_RABIN_ROUNDS, &mut rng), truth[n as usize], "n = {n}");
    }
}

#[test]
fn thousand_round_trips_per_fresh_keypair() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for bits in [64, 256] {
        let (pk, sk) = rsa::keygen(bits, &mut rng).unwrap();
        assert!((&pk.e * sk.d() % sk.phi()) == big(1));
        for _ in 0..1000 {
            let m = rsa::random_message(&pk.n, &mut rng);
            let c = rsa::encrypt(&pk, &m).unwrap();
            assert_eq!(rsa::decrypt(&sk, &c).unwrap(), m);
        }
    }
}

#[test]
fn distinct_keys_from_distinct_seeds() {
    let a = rsa::keygen(128, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
    let b = rsa::keygen(128, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
    let a2 = rsa::keygen(128, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
    assert_ne!(a.n, b.n);
    assert_eq!(a, a2);
}

#[test]
fn rotated_session_cannot_open_old_payloads() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let session = |rng: &mut ChaCha8Rng| -> (SessionCipher, SessionCipher) {
        let hs = ClientHandshake::new(128, rng).unwrap();
        let (w, s) = accept_handshake(&hs.public, rng).unwrap();
        (hs.finish(&w).unwrap(), s)
    };
    let (mut c_old, _) = session(&mut rng);
    let sealed_round4 = c_old.seal(b"round 4 activations", b"").unwrap();
    let (_, mut s_new) = session(&mut rng);
    assert!(s_new.open(&sealed_round4, b"").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seal_open_round_trip(data in proptest::collection::vec(any::<u8>(), 0..2048), flip in any::<usize>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let hs = ClientHandshake::new(96, &mut rng).unwrap();
        let (w, mut s) = accept_handshake(&hs.public, &mut rng).unwrap();
        let mut c = hs.finish(&w).unwrap();
        let sealed = c.seal(&data, b"aad").unwrap();
        let mut tampered = sealed.clone();
        let bit = flip % (tampered.len() * 8);
        tampered[bit / 8] ^= 1 << (bit % 8);
        prop_assert!(s.open(&tampered, b"aad").is_err());
        prop_assert_eq!(s.open(&sealed, b"aad").unwrap(), data);
    }

    #[test]
    fn chunked_textbook_round_trip(data in proptest::collection::vec(any::<u8>(), 0..100)) {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (pk, sk) = rsa::keygen(80, &mut rng).unwrap();
        let ct = rsa::encrypt_chunked(&pk, &data, rsa::TEXTBOOK_CHUNK).unwrap();
        prop_assert_eq!(rsa::decrypt_chunked(&sk, &ct, rsa::TEXTBOOK_CHUNK).unwrap(), data);
    }
}
