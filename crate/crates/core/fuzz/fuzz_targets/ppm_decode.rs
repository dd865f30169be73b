#![no_main]

use egotpil::eval::decode_ppm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        assert_eq!(img.data.len(), img.width * img.height * 3);
    }
});
