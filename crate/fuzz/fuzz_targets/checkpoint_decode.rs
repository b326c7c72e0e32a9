#![no_main]
use kvshare::toolkit::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
        assert_eq!(ck.kv_blob_count(), 2 * ck.topology.n_kv_layers());
    }
});
