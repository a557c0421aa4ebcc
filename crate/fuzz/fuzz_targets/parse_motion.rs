#![no_main]
use libfuzzer_sys::fuzz_target;
use moticomp::io::{format_motion, parse_motion};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(seq) = parse_motion(text) {
        let again = parse_motion(&format_motion(&seq)).expect("formatted motion must parse");
        assert_eq!(again, seq);
    }
});
