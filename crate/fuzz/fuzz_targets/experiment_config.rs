#![no_main]

use ftlab_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&json).expect("reparse"), cfg);
    }
});
