#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::promptgen::{TemplateSet, ThesisTable};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = TemplateSet::from_toml(text);
    let _ = ThesisTable::from_toml(text);
});
