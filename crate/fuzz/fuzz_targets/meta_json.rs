#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::volume::BundleMeta;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(meta) = BundleMeta::from_json(text) {
            let _ = BundleMeta::from_json(&meta.to_json());
        }
    }
});
