#![no_main]

use fedmogp::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cp) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&cp.encode().unwrap()).unwrap();
        assert_eq!(again.rounds_completed, cp.rounds_completed);
    }
});
