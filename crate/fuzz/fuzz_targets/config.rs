#![no_main]

use libfuzzer_sys::fuzz_target;
use stylemask::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = TrainConfig::from_toml(text) {
        let again = TrainConfig::from_toml(&config.to_toml()).expect("serialized config parses");
        assert_eq!(again.to_toml(), config.to_toml());
    }
});
