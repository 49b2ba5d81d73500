#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(arch) = gleak::io::parse_arch_config_str(text) {
            // anything accepted must survive a write/parse round trip
            let again = serde_json::to_string(&gleak::io::arch_to_config(&arch, None)).unwrap();
            assert_eq!(gleak::io::parse_arch_config_str(&again).unwrap(), arch);
        }
    }
});
