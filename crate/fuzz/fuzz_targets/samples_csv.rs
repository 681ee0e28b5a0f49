#![no_main]

use libfuzzer_sys::fuzz_target;
use popsel::sampler::PosteriorSamples;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = PosteriorSamples::parse_csv(text) {
        let again = PosteriorSamples::parse_csv(&s.to_csv()).expect("written samples parse");
        assert_eq!(again.names, s.names);
        assert_eq!(again.draws, s.draws);
    }
});
