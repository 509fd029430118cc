#![no_main]

use libfuzzer_sys::fuzz_target;
use winsfm::tracking::TrackTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = TrackTable::parse(text) {
        let again = TrackTable::parse(&table.to_text()).expect("written tracks parse");
        assert_eq!(again.len(), table.len());
    }
});
