#![no_main]
use libfuzzer_sys::fuzz_target;

// Input layout: sidecar JSON, one NUL byte, container bytes.
fuzz_target!(|data: &[u8]| {
    let Some(cut) = data.iter().position(|&b| b == 0) else {
        return;
    };
    if let Ok(side) = std::str::from_utf8(&data[..cut]) {
        let _ = satdet_core::quant::parse_quantized(side, &data[cut + 1..]);
    }
});
