#![no_main]

use libfuzzer_sys::fuzz_target;
use winsfm::bundle::write_tum;
use winsfm::eval::parse_tum;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(poses) = parse_tum(text) {
        let again = parse_tum(&write_tum(&poses)).expect("written trajectory parses");
        assert_eq!(again.len(), poses.len());
    }
});
