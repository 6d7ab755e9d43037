#![no_main]

use c3_core::document::{parse_lcs_document, write_lcs_document};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(lcs) = parse_lcs_document(text) {
        // anything accepted must survive a write/parse round trip
        let again = write_lcs_document(&lcs).unwrap();
        let back = parse_lcs_document(&again).unwrap();
        assert_eq!(back.a, lcs.a);
        assert_eq!(back.f, lcs.f);
    }
});
