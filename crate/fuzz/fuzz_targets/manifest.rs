#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = fedmogp::data::Manifest::parse(text, Path::new("fuzz/manifest.toml"));
    }
});
