#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = gleak::io::decode_tensor_container(data) {
        // a valid container re-encodes to the same bytes
        let bytes = gleak::io::encode_tensor_container(&entries).unwrap();
        let back = gleak::io::decode_tensor_container(&bytes).unwrap();
        assert_eq!(back.len(), entries.len());
    }
});
