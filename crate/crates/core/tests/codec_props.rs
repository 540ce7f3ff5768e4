mod common;

use common::drle_ref;
use common::inputs::{payload, runless};
use dhub_core::codec::{drle, CodecError, CodecRegistry, DRLE, RAW};
use proptest::prelude::*;

#[test]
fn hand_traced_examples() {
    let reg = CodecRegistry::new();
    assert_eq!(reg.encode(DRLE, &[5, 5, 5, 5]).unwrap(), [0x00, 0x05, 0x80, 0x00]);
    let zero = vec![0u8; 6_220_800];
    let enc = reg.encode(DRLE, &zero).unwrap();
    assert_eq!(enc.len(), 47_852 * 2 + 2);
    assert_eq!(drle_ref::decode(&enc, zero.len()).unwrap(), zero);
    assert!(matches!(reg.decode(DRLE, &[0x80], 3), Err(CodecError::Corrupt(_))));
    assert!(matches!(reg.decode(DRLE, &[0x00, 0x05, 0x80, 0x00], 5), Err(CodecError::Corrupt(_))));
}

#[test]
fn constant_bound_over_every_small_length() {
    for v in [0u8, 1, 200] {
        for n in 4..2000usize {
            let enc = drle::encode(&vec![v; n]);
            assert!(enc.len() <= 2 + 2 * (n - 1).div_ceil(130), "v={v} n={n}: {}", enc.len());
        }
    }
}

#[test]
fn unknown_codec() {
    let reg = CodecRegistry::new();
    assert!(matches!(reg.encode(201, b"x"), Err(CodecError::UnknownCodec(201))));
    assert!(matches!(reg.decode(201, b"x", 1), Err(CodecError::UnknownCodec(201))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip(x in payload()) {
        let reg = CodecRegistry::new();
        for id in [RAW, DRLE] {
            let enc = reg.encode(id, &x).unwrap();
            prop_assert_eq!(&reg.decode(id, &enc, x.len()).unwrap(), &x);
        }
        prop_assert_eq!(reg.encode(RAW, &x).unwrap(), x.clone());
        let enc = drle::encode(&x);
        prop_assert_eq!(drle_ref::decode(&enc, x.len()), Some(x.clone()));
        prop_assert!(enc.len() <= x.len() + x.len().div_ceil(128));
    }

    #[test]
    fn matches_reference_encoder(x in payload().prop_filter("small", |x| x.len() <= 20_000)) {
        prop_assert_eq!(drle::encode(&x), drle_ref::encode(&x));
    }

    #[test]
    fn deterministic(x in payload()) {
        prop_assert_eq!(drle::encode(&x), drle::encode(&x));
    }

    #[test]
    fn constant_bound(v in any::<u8>(), n in 4usize..1_000_000) {
        let enc = drle::encode(&vec![v; n]);
        prop_assert!(enc.len() <= 2 + 2 * (n - 1).div_ceil(130), "{} > bound", enc.len());
    }

    #[test]
    fn worst_case_bound(seed in any::<u64>(), len in 0usize..100_000) {
        let x = runless(seed, len);
        let enc = drle::encode(&x);
        prop_assert!(enc.len() <= len + len.div_ceil(128));
    }

    #[test]
    fn corrupt_input_is_an_error_not_a_panic(e in prop::collection::vec(any::<u8>(), 0..300), n in 0usize..2000) {
        let got = drle::decode(&e, n).ok();
        prop_assert_eq!(got, drle_ref::decode(&e, n));
    }
}
