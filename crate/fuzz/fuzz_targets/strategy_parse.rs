#![no_main]

use ftlab::finetune::Strategy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = text.parse::<Strategy>() {
        let name = s.to_string();
        assert_eq!(name.parse::<Strategy>().expect("canonical name parses"), s);
        let _ = s.lr_table();
    }
});
