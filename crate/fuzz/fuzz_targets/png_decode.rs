#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = gleak::io::decode_png(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // decoded pixels sit on the 8-bit grid, so encoding is lossless
        let again = gleak::io::decode_png(&gleak::io::encode_png(&img).unwrap()).unwrap();
        assert_eq!(again, img);
    }
});
