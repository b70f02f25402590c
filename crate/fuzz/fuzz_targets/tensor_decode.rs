#![no_main]

use libfuzzer_sys::fuzz_target;
use zslvit::numerics::io::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        assert!(t.data().iter().all(|x| x.is_finite()));
        assert_eq!(encode(&t), data);
    }
});
