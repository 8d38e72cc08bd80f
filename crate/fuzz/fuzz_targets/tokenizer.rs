#![no_main]
use isoformer::tokenization::{
    detokenize, tokenize_nucleotide, tokenize_protein, AlphabetKind, TokenSequence, TokenizeError, Vocabulary,
};
use libfuzzer_sys::fuzz_target;

fn check(tokens: &TokenSequence, vocab: &Vocabulary, seq: &str) {
    match detokenize(tokens, vocab) {
        Ok(back) => assert_eq!(
            back.to_ascii_uppercase().replace('T', "U"),
            seq.to_ascii_uppercase().replace('T', "U")
        ),
        Err(TokenizeError::ContainsUnknown(_)) => {}
        Err(e) => panic!("{e}"),
    }
}

fuzz_target!(|input: (u8, bool, &str)| {
    let (k, rna, seq) = input;
    let vocab = Vocabulary::build(AlphabetKind::Nucleotide, 1 + (k % 6) as usize).unwrap();
    if let Ok(tokens) = tokenize_nucleotide(seq, &vocab, rna) {
        check(&tokens, &vocab, seq);
    }
    let protein = Vocabulary::build(AlphabetKind::AminoAcid, 1).unwrap();
    if let Ok(tokens) = tokenize_protein(seq, &protein) {
        check(&tokens, &protein, seq);
    }
});
