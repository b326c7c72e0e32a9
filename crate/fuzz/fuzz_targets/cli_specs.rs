#![no_main]
use kvshare::inference::Sampler;
use kvshare::{Partitioning, Positioning};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = text.parse::<Sampler>() {
        assert_eq!(s.to_string().parse::<Sampler>().unwrap(), s);
    }
    if let Ok(p) = text.parse::<Partitioning>() {
        assert_eq!(p.to_string().parse::<Partitioning>().unwrap(), p);
    }
    if let Ok(p) = text.parse::<Positioning>() {
        assert_eq!(p.to_string().parse::<Positioning>().unwrap(), p);
    }
});
