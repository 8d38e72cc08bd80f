#![no_main]
use isoformer::data::{parse_dataset, write_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(ds) = parse_dataset(text, "fuzz") {
        let again = parse_dataset(&write_dataset(&ds.records, &ds.tissues), "fuzz").expect("written dataset parses");
        assert_eq!(again, ds);
    }
});
