#![no_main]

use libfuzzer_sys::fuzz_target;
use zslvit::data::{format_splits, parse_splits};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(samples) = parse_splits(text) {
        for s in &samples {
            assert!(!s.image_file.starts_with('/'));
            assert!(!s.image_file.split('/').any(|c| c == ".."));
        }
        assert_eq!(parse_splits(&format_splits(&samples)).expect("formatted splits parse"), samples);
    }
});
