#![no_main]

use libfuzzer_sys::fuzz_target;
use popsel::config::{format_selection, parse_selection};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sel) = parse_selection(text) {
        assert_eq!(parse_selection(&format_selection(&sel)).expect("formatted spec parses"), sel);
    }
});
