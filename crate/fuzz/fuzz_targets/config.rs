#![no_main]
use isoformer::config::KeyValues;
use isoformer::model::ModelConfig;
use isoformer::training::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(kv) = KeyValues::parse(text) {
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
        let _ = ModelConfig::from_key_values(&kv);
        let _ = RunConfig::from_key_values(&kv);
    }
});
