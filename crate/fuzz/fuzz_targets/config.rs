#![no_main]

use fusioncast::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse_str(text) {
        let again = RunConfig::parse_str(&cfg.snapshot()).expect("snapshot parses");
        assert_eq!(again.snapshot(), cfg.snapshot());
    }
});
