#![no_main]

use fusioncast::data::{parse_station_csv, GridSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_station_csv(data, None);
    if let Ok(spec) = GridSpec::default_with_extent(16) {
        let _ = parse_station_csv(data, Some(&spec));
    }
});
