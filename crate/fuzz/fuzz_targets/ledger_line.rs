#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::backend::Exchange;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(exchange) = Exchange::from_line(line) {
        assert_eq!(Exchange::from_line(&exchange.to_line()).unwrap(), exchange);
    }
});
