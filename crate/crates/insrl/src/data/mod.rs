//! Corpus ingestion, vocabularies, sample encoding, and synthetic data.

mod corpus;
mod encode;
mod synth;
mod vocab;
pub mod toygen;

pub use corpus::{
    group_eval_pairs, load_corpus, CorpusPaths, CorpusStats, DescriptionRecord, RawBag,
    RawDataset, SentenceRecord, TypeRecord,
};
pub use encode::{
    decode_tokens, encode_dataset, encode_description, encode_eval_pairs, encode_sentence,
    encode_typeset, EncodeConfig, EncodedDescription, EncodedSentence, EncodedTypeSet,
    EntityPairSample, EvalPair,
};
pub use synth::{
    generate as synth_generate, read_feature_jsonl, write_feature_jsonl, FeatureSample,
    SynthConfig, SynthDataset,
};
pub use vocab::{build_vocab, load_word_vectors, Vocab, NULL_TYPE_ID, PAD_WORD_ID, UNK_WORD_ID};

/// Stable 64-bit FNV-1a mix of a base seed and a string tag; used to derive
/// per-entity and per-bag RNG streams that survive across runs.
pub(crate) fn mix_seed(seed: u64, tag: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}
