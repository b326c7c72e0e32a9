#![no_main]
use kvshare::toolkit::{read_bench_csv, write_bench_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_bench_csv(data) {
        let mut out = Vec::new();
        write_bench_csv(&rows, &mut out).unwrap();
        let again = read_bench_csv(out.as_slice()).unwrap();
        assert_eq!(again.len(), rows.len());
    }
});
