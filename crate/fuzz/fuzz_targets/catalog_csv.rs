#![no_main]

use libfuzzer_sys::fuzz_target;
use popsel::simulate::Catalog;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(events) = Catalog::parse_events(text) {
        let cat = Catalog { events, n_drawn: 0, provenance: Default::default() };
        let again = Catalog::parse_events(&cat.to_csv()).expect("written catalogue parses");
        assert_eq!(again.len(), cat.events.len());
        // true_value may be NaN, so compare bit patterns
        for (a, b) in again.iter().zip(&cat.events) {
            assert_eq!(a.true_value.to_bits(), b.true_value.to_bits());
            assert_eq!(a.observed_value.to_bits(), b.observed_value.to_bits());
            assert_eq!(a.noise_sd.to_bits(), b.noise_sd.to_bits());
        }
    }
});
