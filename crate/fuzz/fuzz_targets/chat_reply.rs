#![no_main]

use libfuzzer_sys::fuzz_target;
use stancevote::backend::decode_chat_reply;

fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else { return };
    let _ = decode_chat_reply(body);
});
