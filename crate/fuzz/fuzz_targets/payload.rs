#![no_main]

use fedmogp::checkpoint::{decode_payload, encode_payload};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_payload(data) {
        assert_eq!(decode_payload(&encode_payload(&p).unwrap()).unwrap(), p);
    }
});
