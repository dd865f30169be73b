#![no_main]

use egotpil::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = RunConfig::parse(data);
});
