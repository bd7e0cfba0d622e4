#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::phantom::PhantomTruth;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PhantomTruth::from_json(text);
    }
});
