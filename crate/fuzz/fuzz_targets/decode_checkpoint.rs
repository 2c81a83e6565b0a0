#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = c3r::checkpoint::decode_checkpoint(data) {
        let _ = ckpt.into_state();
    }
});
