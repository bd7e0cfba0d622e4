#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::cohort::Cohort;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cohort) = Cohort::from_json(text) {
            let _ = Cohort::from_json(&cohort.to_json()).expect("written cohort parses");
        }
    }
});
