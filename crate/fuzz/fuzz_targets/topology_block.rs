#![no_main]
use kvshare::KVTopology;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = KVTopology::from_config_block(text) {
        let map = t.kv_map();
        assert!((0..map.len()).all(|i| map[map[i]] == map[i]));
        assert_eq!(KVTopology::from_config_block(&t.to_config_block()).unwrap(), t);
    }
});
