#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::phantom::PhantomConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PhantomConfig::from_toml_str(text);
    }
});
