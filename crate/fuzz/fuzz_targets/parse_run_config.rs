#![no_main]

use c3_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = cfg.to_toml().unwrap();
        RunConfig::parse(&again).unwrap();
    }
});
