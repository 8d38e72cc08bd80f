#![no_main]
use isoformer::data::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_manifest(text, "fuzz");
});
