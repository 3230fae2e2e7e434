#![no_main]

use libfuzzer_sys::fuzz_target;

use evtexture::data::SynthConfig;
use evtexture::network::NetworkConfig;
use evtexture::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // config deserialization and validation must never panic
    if let Ok(cfg) = serde_yaml::from_str::<NetworkConfig>(text) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = serde_yaml::from_str::<TrainConfig>(text) {
        let _ = cfg.validate();
    }
    let _ = serde_yaml::from_str::<SynthConfig>(text);
});
