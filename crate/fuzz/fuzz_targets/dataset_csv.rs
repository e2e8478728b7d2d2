#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| cdt_lab_fuzz::dataset_csv(data));
