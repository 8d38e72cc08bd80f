#![no_main]
use isoformer::tokenization::{AlphabetKind, Vocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: (bool, &str)| {
    let kind = if input.0 { AlphabetKind::Nucleotide } else { AlphabetKind::AminoAcid };
    if let Ok(v) = Vocabulary::parse_dump(input.1, kind) {
        assert_eq!(Vocabulary::parse_dump(&v.dump(), kind).unwrap(), v);
    }
});
