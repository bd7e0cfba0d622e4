#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::metrics::Report;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = Report::parse(text) {
            let _ = Report::parse(&report.to_csv()).expect("written report parses");
        }
    }
});
