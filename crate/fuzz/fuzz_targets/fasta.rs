#![no_main]
use isoformer::data::parse_fasta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(entries) = parse_fasta(text, "fuzz") {
        for (id, seq) in entries {
            assert!(!id.is_empty());
            assert!(!seq.contains(char::is_whitespace));
        }
    }
});
