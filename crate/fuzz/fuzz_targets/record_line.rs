#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::Record;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(record) = Record::from_line(line) {
        assert_eq!(Record::from_line(&record.to_line()).unwrap(), record);
    }
});
