#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = satdet_core::imageio::decode_png16(data) {
        assert_eq!(img.data.len(), img.width * img.height);
    }
});
