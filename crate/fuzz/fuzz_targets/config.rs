#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = fedmogp::config::ExperimentConfig::from_toml_str(text) {
            cfg.validate().expect("parsed configs are validated");
        }
    }
});
