#![no_main]

use libfuzzer_sys::fuzz_target;
use winsfm::config::{parse_intrinsics, write_intrinsics};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_intrinsics(text) {
        parse_intrinsics(&write_intrinsics(&file)).expect("written intrinsics parse");
    }
});
