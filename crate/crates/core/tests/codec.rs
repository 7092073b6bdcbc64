use graffiti_core::codec::{decode_payload, encode_payload, encoded_len, generate_key, recover_from_page, wrap_page, ReplicaKey, MARKER_LEN};
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Blowfish works on 8-byte blocks; padding always adds 1..=8 bytes and the
/// ciphertext is never shorter than three blocks.
fn oracle_text_len(n: usize) -> usize {
    let padded = ((n / 8) + 1) * 8;
    let ct = padded.max(24);
    4 * ct.div_ceil(3)
}

fn key(seed: u64) -> ReplicaKey {
    generate_key(&mut ChaCha20Rng::seed_from_u64(seed))
}

#[test]
fn full_subpiece_length_matches_oracle() {
    assert_eq!(oracle_text_len(65_536), 87_392);
    assert_eq!(encoded_len(65_536), 87_392);
    let data = vec![0xA5; 65_536];
    assert_eq!(encode_payload(&data, &key(1)).unwrap().text.len(), 87_392);
}

#[test]
fn every_small_size_round_trips() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for n in 1..=1_100 {
        let mut data = vec![0u8; n];
        rng.fill_bytes(&mut data);
        let k = key(n as u64);
        let p = encode_payload(&data, &k).unwrap();
        assert_eq!(p.text.len(), oracle_text_len(n), "size {n}");
        assert_eq!(decode_payload(&p.text, &k, &p.plaintext_checksum).unwrap(), data, "size {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn round_trip_up_to_64_kib(len in 1usize..=65_536, seed in any::<u64>()) {
        let mut data = vec![0u8; len];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut data);
        let k = key(seed);
        let p = encode_payload(&data, &k).unwrap();
        prop_assert_eq!(p.text.len(), oracle_text_len(len));
        prop_assert_eq!(&p.start_marker[..], &p.text[..MARKER_LEN]);
        prop_assert_eq!(&p.end_marker[..], &p.text[p.text.len() - MARKER_LEN..]);
        let page = wrap_page(&p, "notice", "http://tracker.test/m.json").unwrap();
        let back = recover_from_page(&page, &k, &p.plaintext_checksum, &p.start_marker, &p.end_marker).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn any_other_key_fails(len in 1usize..=2_048, a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        let data = vec![7u8; len];
        let p = encode_payload(&data, &key(a)).unwrap();
        prop_assert!(decode_payload(&p.text, &key(b), &p.plaintext_checksum).is_err());
    }

    #[test]
    fn surrounding_text_is_ignored(prefix in "[ -~]{0,200}", suffix in "[ -~]{0,200}", seed in any::<u64>()) {
        let data = seed.to_le_bytes().repeat(20);
        let k = key(seed);
        let p = encode_payload(&data, &k).unwrap();
        let page = format!("{prefix}\n{}\n{suffix}", p.text);
        let back = recover_from_page(&page, &k, &p.plaintext_checksum, &p.start_marker, &p.end_marker).unwrap();
        prop_assert_eq!(back, data);
    }
}

#[test]
fn single_character_mutations_never_decode_to_other_bytes() {
    let mut data = vec![0u8; 256];
    ChaCha20Rng::seed_from_u64(3).fill_bytes(&mut data);
    let k = key(3);
    let p = encode_payload(&data, &k).unwrap();
    let alphabet = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/=";
    let mut text = p.text.clone().into_bytes();
    for i in 0..text.len() {
        let orig = text[i];
        for &c in alphabet.iter().filter(|&&c| c != orig) {
            text[i] = c;
            let s = std::str::from_utf8(&text).unwrap();
            if let Ok(bytes) = decode_payload(s, &k, &p.plaintext_checksum) {
                assert_eq!(bytes, data, "position {i}");
            }
        }
        text[i] = orig;
    }
}
