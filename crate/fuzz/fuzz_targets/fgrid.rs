#![no_main]

use fusioncast::data::fgrid::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((h, grid)) = decode(data) {
        // Anything that decodes must re-encode to a file that decodes the same way.
        let again = encode(&grid, h.epoch, h.unit, h.dtype);
        let (h2, g2) = decode(&again).expect("re-encoded grid decodes");
        assert_eq!((h2.n, h2.epoch), (h.n, h.epoch));
        assert_eq!(g2.values().len(), grid.values().len());
    }
});
