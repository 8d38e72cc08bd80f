#![no_main]
use isoformer::data::NormalizationStats;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(stats) = NormalizationStats::parse(text, "fuzz") {
        assert_eq!(NormalizationStats::parse(&stats.to_text(), "fuzz").unwrap(), stats);
    }
});
