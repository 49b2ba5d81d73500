#![no_main]

use libfuzzer_sys::fuzz_target;
use gleak::network::{ActivationKind, Architecture, ConvSpec, FcSpec};
use gleak::tensor::Shape3;

fuzz_target!(|data: &[u8]| {
    let arch = Architecture::new(
        "fuzz",
        Shape3::new(4, 4, 1),
        vec![ConvSpec {
            filters: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
            activation: ActivationKind::Tanh,
        }],
        FcSpec { classes: 3 },
    )
    .unwrap();
    if let Ok(entries) = gleak::io::decode_tensor_container(data) {
        let _ = gleak::io::capture_from_entries(&arch, &entries);
        let _ = gleak::io::params_from_entries(&arch, &entries);
    }
});
