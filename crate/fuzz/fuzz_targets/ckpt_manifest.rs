#![no_main]

use libfuzzer_sys::fuzz_target;
use zslvit::params::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text) {
        for (name, _) in &entries {
            assert!(!name.is_empty());
        }
    }
});
