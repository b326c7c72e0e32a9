#![no_main]
use kvshare::toolkit::parse_pairs;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pairs) = parse_pairs(text) {
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|&(x, y)| x > 0 && y > 0));
    }
});
