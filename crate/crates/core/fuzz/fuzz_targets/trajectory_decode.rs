#![no_main]

use egotpil::sim::Trajectory;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Trajectory::decode(data) {
        let again = Trajectory::decode(&t.encode()).expect("re-encoded trajectory decodes");
        assert_eq!(again.encode(), t.encode());
    }
});
