//! Feed arbitrary text to the corpus loader and tokenizer.
//!
//! Any text the loader accepts must tokenize losslessly (decode ∘ encode is
//! the identity) and split into train/valid/test ranges that partition the
//! stream exactly. Rejections must be errors, never panics.

#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbq::data::TextDataset;

fuzz_target!(|text: &str| {
    let Ok(dataset) = TextDataset::from_text(text) else {
        return;
    };
    let encoded = dataset.tokenizer.encode(text).expect("own corpus must encode");
    assert_eq!(encoded.len(), dataset.len(), "token count mismatch");
    let decoded = dataset.tokenizer.decode(&encoded).expect("own tokens must decode");
    assert_eq!(decoded, text, "tokenization must be lossless");

    let (train, valid, test) =
        (dataset.train_tokens(), dataset.valid_tokens(), dataset.test_tokens());
    assert_eq!(
        train.len() + valid.len() + test.len(),
        dataset.len(),
        "splits must partition the stream"
    );
    let rejoined: Vec<u32> =
        train.iter().chain(valid).chain(test).copied().collect();
    assert_eq!(rejoined, encoded, "splits must be contiguous and ordered");
});
