#![no_main]
use isoformer::data::ExpressionTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = ExpressionTable::parse(text, "fuzz");
});
