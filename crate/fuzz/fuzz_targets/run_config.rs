#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use lrelab::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml(text, "fuzz.toml", Path::new("."), &[]) {
        cfg.validate().expect("a loaded config stays valid");
    }
});
