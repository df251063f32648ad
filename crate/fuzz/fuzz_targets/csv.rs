#![no_main]

use std::path::Path;

use fedmogp::mogp::TaskKind;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&selector, rest)) = data.split_first() else { return };
    let kind = if selector & 1 == 0 { TaskKind::Regression } else { TaskKind::Classification };
    if let Ok(text) = std::str::from_utf8(rest) {
        if let Ok((x, y, _)) = fedmogp::data::parse_task_csv(text, Path::new("fuzz.csv"), kind) {
            assert_eq!(x.len(), y.len());
        }
    }
});
