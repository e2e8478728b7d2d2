#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| cdt_lab_fuzz::filter_conformance(data));
