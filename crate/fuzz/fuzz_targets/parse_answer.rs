#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::parsing::{parse_answer, AnswerFormat};
use stancevote::Mode;

fuzz_target!(|data: &[u8]| {
    let Ok(raw) = std::str::from_utf8(data) else { return };
    for format in [AnswerFormat::Words, AnswerFormat::Letters, AnswerFormat::CotFinalLine, AnswerFormat::Number] {
        for mode in [Mode::TwoClass, Mode::ThreeClass] {
            if let Some(label) = parse_answer(raw, format, mode).label {
                assert!(mode.admits(label));
            }
        }
    }
});
