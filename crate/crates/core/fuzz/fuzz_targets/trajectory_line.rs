#![no_main]

use ctmsm::io::{parse_trajectory_line, trajectory_to_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(t) = parse_trajectory_line(line, 1) else { return };
    if let Ok(out) = trajectory_to_line(&t) {
        let back = parse_trajectory_line(&out, 1).expect("serialized record must parse");
        assert_eq!(trajectory_to_line(&back).unwrap(), out);
    }
});
