#![no_main]

use libfuzzer_sys::fuzz_target;
use zslvit::config::{parse_flat, RunConfig};
use zslvit::data::SynthSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_flat::<RunConfig>(text) {
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let _ = cfg.model_config(32, 3, 16);
        let _ = cfg.train_config();
    }
    if let Ok(spec) = parse_flat::<SynthSpec>(text) {
        let _ = spec.validate();
    }
});
