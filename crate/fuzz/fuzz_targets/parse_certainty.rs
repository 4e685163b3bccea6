#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::parsing::parse_certainty;

fuzz_target!(|data: &[u8]| {
    let Ok(raw) = std::str::from_utf8(data) else { return };
    if let Some(c) = parse_certainty(raw) {
        assert!((0.0..=1.0).contains(&c));
    }
});
