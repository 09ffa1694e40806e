#![no_main]
use libfuzzer_sys::fuzz_target;
use satdet_nn::container::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        // Compared as bytes so NaN payloads round-trip too.
        let again = encode(&tensors);
        assert_eq!(encode(&decode(&again).unwrap()), again);
    }
});
