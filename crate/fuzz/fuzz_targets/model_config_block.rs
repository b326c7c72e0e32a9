#![no_main]
use kvshare::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = ModelConfig::from_config_block(text) {
        assert_eq!(ModelConfig::from_config_block(&c.to_config_block()).unwrap(), c);
    }
});
