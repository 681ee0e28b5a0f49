#![no_main]

use libfuzzer_sys::fuzz_target;
use popsel::population::DensityGrid;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = DensityGrid::parse_csv(text) {
        let _ = g.integral();
        let _ = g.normalized();
        DensityGrid::parse_csv(&g.to_csv()).expect("written grid parses");
    }
});
