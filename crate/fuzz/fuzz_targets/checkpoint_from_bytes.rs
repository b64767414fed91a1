#![no_main]

use ftlab::mininet::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes().expect("re-encode accepted checkpoint");
        let again = Checkpoint::from_bytes(&bytes).expect("decode re-encoded checkpoint");
        assert_eq!(again.to_bytes().unwrap(), bytes);
        ckpt.to_model().expect("accepted checkpoint builds a model");
    }
});
