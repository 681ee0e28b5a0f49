#![no_main]

use libfuzzer_sys::fuzz_target;
use popsel::io::Metadata;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Metadata::parse(text) {
        let _ = Metadata::parse(&m.to_toml());
    }
});
