#![no_main]
use isoformer::data::DatasetSplit;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(split) = DatasetSplit::parse(text, "fuzz") {
        assert_eq!(DatasetSplit::parse(&split.to_text(), "fuzz").unwrap(), split);
    }
});
