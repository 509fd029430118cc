#![no_main]

use libfuzzer_sys::fuzz_target;
use winsfm::eval::{parse_gt_points, write_gt_points};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(points) = parse_gt_points(text) {
        let again = parse_gt_points(&write_gt_points(&points)).expect("written points parse");
        assert_eq!(again.len(), points.len());
    }
});
