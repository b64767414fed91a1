#![no_main]

use ftlab::synth::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = decode_dataset(data) {
        let bytes = encode_dataset(&samples).expect("re-encode accepted dataset");
        let again = decode_dataset(&bytes).expect("decode re-encoded dataset");
        assert_eq!(again.len(), samples.len());
        for (a, b) in again.iter().zip(&samples) {
            assert_eq!(a.label, b.label);
            assert!(a.image.bit_eq(&b.image));
        }
    }
});
