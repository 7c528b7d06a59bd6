#![no_main]

use ctmsm::config::StudyConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = StudyConfig::from_json(text) else { return };
    let _ = config.scenario();
    let json = serde_json::to_string(&config).unwrap();
    assert_eq!(StudyConfig::from_json(&json).unwrap(), config);
});
