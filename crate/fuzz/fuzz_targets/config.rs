#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::runner::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_toml_str(text) {
        let _ = ExperimentConfig::from_toml_str(&config.to_toml_string());
    }
});
