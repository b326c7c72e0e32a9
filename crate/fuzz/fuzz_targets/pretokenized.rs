#![no_main]
use kvshare::toolkit::{decode_pretokenized, encode_pretokenized};
use libfuzzer_sys::fuzz_target;

// First byte picks the width, the next two the vocabulary size.
fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let width = if data[0] & 1 == 0 { 16 } else { 32 };
    let vocab = 1 + u16::from_le_bytes([data[1], data[2]]) as usize;
    let body = &data[3..];
    if let Ok(s) = decode_pretokenized(body, width, vocab) {
        assert!(s.ids().iter().all(|&t| t < vocab));
        assert_eq!(encode_pretokenized(s.ids(), width).unwrap(), body);
    }
});
