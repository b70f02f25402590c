#![no_main]

use libfuzzer_sys::fuzz_target;
use zslvit::trace::{format_traces, parse_traces};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_traces(text) {
        for r in &records {
            assert_eq!(r.mask.len(), r.grid * r.grid);
        }
        let again = parse_traces(&format_traces(&records)).expect("formatted traces parse");
        assert_eq!(again.len(), records.len());
    }
});
