#![no_main]

use fusioncast::model::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode(data) {
        let again = encode(&store);
        let back = decode(&again).expect("re-encoded checkpoint decodes");
        assert_eq!(encode(&back), again);
    }
});
