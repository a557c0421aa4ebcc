#![no_main]
use libfuzzer_sys::fuzz_target;
use moticomp::io::{decode_checkpoint, predictor_from_bytes, vae_from_bytes};

fuzz_target!(|data: &[u8]| {
    let _ = decode_checkpoint(data);
    let _ = vae_from_bytes(data);
    let _ = predictor_from_bytes(data);
});
