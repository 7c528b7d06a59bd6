#![no_main]

use ctmsm::io::{dataset_to_string, parse_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = parse_dataset(text, None) else { return };
    let out = dataset_to_string(&records).expect("validated records serialize");
    let back = parse_dataset(&out, None).expect("serialized dataset must parse");
    assert_eq!(back, records);
});
