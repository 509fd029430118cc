#![no_main]

use libfuzzer_sys::fuzz_target;
use winsfm::eval::parse_kitti;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(poses) = parse_kitti(text, None) {
        for p in &poses {
            assert!(p.position.iter().all(|v| v.is_finite()));
        }
    }
});
