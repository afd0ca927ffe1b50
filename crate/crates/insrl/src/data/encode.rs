//! Fixed-length sample encoding: padding, truncation, relative positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{group_eval_pairs, RawDataset, SentenceRecord};
use crate::data::mix_seed;
use crate::data::vocab::{Vocab, NULL_TYPE_ID, PAD_WORD_ID};

/// Reserved position ids: 0 = padding, 1 = beyond the clip range.
pub const PAD_POS_ID: usize = 0;
pub const OUT_OF_RANGE_POS_ID: usize = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeConfig {
    /// Fixed sentence/description length `l`; longer sequences are truncated,
    /// shorter ones padded.
    pub max_len: usize,
    /// Fixed type-set size; larger sets are randomly discarded down to this.
    pub max_types: usize,
    /// Relative distances outside `[-clip, +clip]` share one bucket id.
    pub position_clip: usize,
    /// Bags larger than this are seed-subsampled.
    pub bag_cap: usize,
    pub seed: u64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            max_len: 120,
            max_types: 15,
            position_clip: 60,
            bag_cap: 500,
            seed: 0,
        }
    }
}

impl EncodeConfig {
    /// Number of distinct position ids (pad + out-of-range + 2·clip+1 buckets).
    pub fn position_vocab(&self) -> usize {
        2 * self.position_clip + 3
    }

    fn position_id(&self, token_index: usize, entity_index: usize) -> usize {
        let d = token_index as isize - entity_index as isize;
        let clip = self.position_clip as isize;
        if d < -clip || d > clip {
            OUT_OF_RANGE_POS_ID
        } else {
            (d + clip) as usize + 2
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedSentence {
    pub tokens: Vec<usize>,
    pub pos_head: Vec<usize>,
    pub pos_tail: Vec<usize>,
    /// True (unpadded) length, always ≥ 1.
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedDescription {
    pub tokens: Vec<usize>,
    pub pos: Vec<usize>,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedTypeSet {
    pub types: Vec<usize>,
    /// Number of attended entries; a typeless entity keeps one "null" slot.
    pub len: usize,
}

/// One training unit: a `(pair, relation)` bag with its descriptions and types.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntityPairSample {
    pub head: String,
    pub tail: String,
    pub bag: Vec<EncodedSentence>,
    pub descriptions: (EncodedDescription, EncodedDescription),
    pub types: (EncodedTypeSet, EncodedTypeSet),
    pub relation: usize,
}

/// One held-out unit: every sentence for a pair plus its gold relations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPair {
    pub head: String,
    pub tail: String,
    pub bag: Vec<EncodedSentence>,
    pub descriptions: (EncodedDescription, EncodedDescription),
    pub types: (EncodedTypeSet, EncodedTypeSet),
    pub gold: Vec<usize>,
}

/// Tokens of an entity's surface name; the pseudo-description fallback.
pub fn entity_name_tokens(entity: &str) -> Vec<String> {
    entity
        .split(|c: char| c == '_' || c == '/' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

pub fn encode_sentence(rec: &SentenceRecord, vocab: &Vocab, cfg: &EncodeConfig) -> EncodedSentence {
    let l = cfg.max_len;
    let len = rec.tokens.len().min(l);
    let mut tokens = vec![PAD_WORD_ID; l];
    let mut pos_head = vec![PAD_POS_ID; l];
    let mut pos_tail = vec![PAD_POS_ID; l];
    for i in 0..len {
        tokens[i] = vocab.word_id(&rec.tokens[i]);
        pos_head[i] = cfg.position_id(i, rec.head_pos);
        pos_tail[i] = cfg.position_id(i, rec.tail_pos);
    }
    EncodedSentence {
        tokens,
        pos_head,
        pos_tail,
        len,
    }
}

/// Encode a description; `tokens` falls back to the entity's surface name when
/// the descriptions file has no entry (never an error). The entity position is
/// the first exact window match of the name tokens, else 0.
pub fn encode_description(
    entity: &str,
    tokens: Option<&[String]>,
    vocab: &Vocab,
    cfg: &EncodeConfig,
) -> EncodedDescription {
    let fallback;
    let tokens = match tokens {
        Some(t) if !t.is_empty() => t,
        _ => {
            fallback = entity_name_tokens(entity);
            &fallback[..]
        }
    };
    let name = entity_name_tokens(entity);
    let entity_pos = find_subsequence(tokens, &name).unwrap_or(0);

    let l = cfg.max_len;
    let len = tokens.len().min(l).max(1);
    let mut ids = vec![PAD_WORD_ID; l];
    let mut pos = vec![PAD_POS_ID; l];
    for i in 0..tokens.len().min(l) {
        ids[i] = vocab.word_id(&tokens[i]);
        pos[i] = cfg.position_id(i, entity_pos);
    }
    EncodedDescription {
        tokens: ids,
        pos,
        len,
    }
}

fn find_subsequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

/// Encode a type set, seed-discarding down to `max_types` when oversized.
/// A typeless entity attends to a single "null" slot.
pub fn encode_typeset(
    entity: &str,
    types: Option<&[String]>,
    vocab: &Vocab,
    cfg: &EncodeConfig,
) -> EncodedTypeSet {
    let l0 = cfg.max_types;
    let mut ids: Vec<usize> = types
        .unwrap_or(&[])
        .iter()
        .map(|t| vocab.type_id(t))
        .collect();
    if ids.len() > l0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, entity));
        ids = sample_without_replacement(&ids, l0, &mut rng);
    }
    let len = ids.len().max(1);
    ids.resize(l0, NULL_TYPE_ID);
    EncodedTypeSet { types: ids, len }
}

fn sample_without_replacement<T: Copy>(items: &[T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut indices: Vec<usize> = (0..items.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices[..k].iter().map(|&i| items[i]).collect()
}

fn encode_pair_context(
    head: &str,
    tail: &str,
    dataset: &RawDataset,
    vocab: &Vocab,
    cfg: &EncodeConfig,
) -> (
    (EncodedDescription, EncodedDescription),
    (EncodedTypeSet, EncodedTypeSet),
) {
    let d1 = encode_description(head, dataset.descriptions.get(head).map(|v| &v[..]), vocab, cfg);
    let d2 = encode_description(tail, dataset.descriptions.get(tail).map(|v| &v[..]), vocab, cfg);
    let t1 = encode_typeset(head, dataset.types.get(head).map(|v| &v[..]), vocab, cfg);
    let t2 = encode_typeset(tail, dataset.types.get(tail).map(|v| &v[..]), vocab, cfg);
    ((d1, d2), (t1, t2))
}

fn encode_bag(
    indices: &[usize],
    bag_tag: &str,
    dataset: &RawDataset,
    vocab: &Vocab,
    cfg: &EncodeConfig,
) -> Vec<EncodedSentence> {
    let mut picked: Vec<usize> = indices.to_vec();
    if picked.len() > cfg.bag_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, bag_tag));
        picked = sample_without_replacement(&picked, cfg.bag_cap, &mut rng);
    }
    picked
        .iter()
        .map(|&i| encode_sentence(&dataset.sentences[i], vocab, cfg))
        .collect()
}

/// Encode every training bag into an [`EntityPairSample`].
pub fn encode_dataset(
    dataset: &RawDataset,
    vocab: &Vocab,
    cfg: &EncodeConfig,
) -> Vec<EntityPairSample> {
    dataset
        .bags
        .par_iter()
        .map(|bag| {
            let tag = format!("{}\t{}\t{}", bag.head, bag.tail, bag.relation);
            let sentences = encode_bag(&bag.sentence_indices, &tag, dataset, vocab, cfg);
            let (descriptions, types) =
                encode_pair_context(&bag.head, &bag.tail, dataset, vocab, cfg);
            EntityPairSample {
                head: bag.head.clone(),
                tail: bag.tail.clone(),
                bag: sentences,
                descriptions,
                types,
                relation: bag.relation,
            }
        })
        .collect()
}

/// Encode held-out pairs: sentences grouped per pair regardless of relation.
pub fn encode_eval_pairs(dataset: &RawDataset, vocab: &Vocab, cfg: &EncodeConfig) -> Vec<EvalPair> {
    group_eval_pairs(dataset)
        .into_par_iter()
        .map(|(head, tail, indices, gold)| {
            let tag = format!("{head}\t{tail}\t*");
            let bag = encode_bag(&indices, &tag, dataset, vocab, cfg);
            let (descriptions, types) = encode_pair_context(&head, &tail, dataset, vocab, cfg);
            EvalPair {
                head,
                tail,
                bag,
                descriptions,
                types,
                gold,
            }
        })
        .collect()
}

/// Inverse of token encoding, for round-trip tests: pads dropped, unknown
/// words surfaced as the unknown token.
pub fn decode_tokens(vocab: &Vocab, encoded: &EncodedSentence) -> Vec<String> {
    encoded.tokens[..encoded.len]
        .iter()
        .map(|&id| vocab.words[id].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::RawBag;
    use std::collections::HashMap;

    fn toy_vocab() -> Vocab {
        let ds = RawDataset {
            sentences: vec![SentenceRecord {
                head: "e1".into(),
                tail: "e2".into(),
                relation: "r1".into(),
                tokens: ["alpha", "beta", "gamma", "delta"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                head_pos: 0,
                tail_pos: 3,
            }],
            descriptions: HashMap::new(),
            types: HashMap::from([(
                "e1".to_string(),
                vec!["person".to_string(), "artist".to_string()],
            )]),
            relations: vec!["NA".into(), "r1".into()],
            bags: Vec::<RawBag>::new(),
        };
        crate::data::vocab::build_vocab(&ds, 1)
    }

    fn small_cfg() -> EncodeConfig {
        EncodeConfig {
            max_len: 6,
            max_types: 3,
            position_clip: 4,
            bag_cap: 10,
            seed: 7,
        }
    }

    #[test]
    fn head_entity_token_has_position_zero_bucket() {
        let vocab = toy_vocab();
        let cfg = small_cfg();
        let rec = SentenceRecord {
            head: "e1".into(),
            tail: "e2".into(),
            relation: "r1".into(),
            tokens: vec!["alpha".into(), "beta".into(), "gamma".into()],
            head_pos: 1,
            tail_pos: 2,
        };
        let enc = encode_sentence(&rec, &vocab, &cfg);
        // distance 0 maps to clip + 2
        assert_eq!(enc.pos_head[1], cfg.position_clip + 2);
        assert_eq!(enc.pos_tail[2], cfg.position_clip + 2);
        // padding slots keep the reserved ids
        assert_eq!(enc.tokens[4], PAD_WORD_ID);
        assert_eq!(enc.pos_head[4], PAD_POS_ID);
        assert_eq!(enc.len, 3);
    }

    #[test]
    fn long_sentences_truncate_to_max_len() {
        let vocab = toy_vocab();
        let cfg = EncodeConfig::default(); // l = 120
        let tokens: Vec<String> = (0..130).map(|i| format!("w{i}")).collect();
        let rec = SentenceRecord {
            head: "e1".into(),
            tail: "e2".into(),
            relation: "r1".into(),
            tokens,
            head_pos: 0,
            tail_pos: 129,
        };
        let enc = encode_sentence(&rec, &vocab, &cfg);
        assert_eq!(enc.tokens.len(), 120);
        assert_eq!(enc.len, 120);
    }

    #[test]
    fn out_of_range_distances_bucket() {
        let vocab = toy_vocab();
        let cfg = small_cfg(); // clip 4
        let tokens: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let rec = SentenceRecord {
            head: "e1".into(),
            tail: "e2".into(),
            relation: "r1".into(),
            tokens,
            head_pos: 0,
            tail_pos: 5,
        };
        let enc = encode_sentence(&rec, &vocab, &cfg);
        assert_eq!(enc.pos_head[5], OUT_OF_RANGE_POS_ID);
        assert!(enc.pos_head[4] != OUT_OF_RANGE_POS_ID);
    }

    #[test]
    fn missing_description_falls_back_to_name_tokens() {
        use crate::data::vocab::UNK_WORD_ID;
        let vocab = toy_vocab();
        let cfg = small_cfg();
        let enc = encode_description("new_york_city", None, &vocab, &cfg);
        assert_eq!(enc.len, 3); // "new", "york", "city"
        assert!(enc.tokens[..3].iter().all(|&t| t == UNK_WORD_ID));
    }

    #[test]
    fn description_entity_position_uses_first_match() {
        let vocab = toy_vocab();
        let cfg = small_cfg();
        let tokens: Vec<String> = ["the", "alpha", "is", "alpha"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let enc = encode_description("alpha", Some(&tokens), &vocab, &cfg);
        // entity at index 1 → that token's relative distance is 0
        assert_eq!(enc.pos[1], cfg.position_clip + 2);
    }

    #[test]
    fn oversized_typeset_subsample_is_reproducible() {
        let vocab = toy_vocab();
        let cfg = EncodeConfig {
            max_types: 15,
            ..EncodeConfig::default()
        };
        let types: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let a = encode_typeset("e1", Some(&types), &vocab, &cfg);
        let b = encode_typeset("e1", Some(&types), &vocab, &cfg);
        assert_eq!(a.types, b.types);
        assert_eq!(a.len, 15);
        assert_eq!(a.types.len(), 15);
        // a different entity draws from its own stream, also reproducibly
        let c = encode_typeset("e2", Some(&types), &vocab, &cfg);
        let d = encode_typeset("e2", Some(&types), &vocab, &cfg);
        assert_eq!(c.types, d.types);
    }

    #[test]
    fn typeless_entity_keeps_one_null_slot() {
        let vocab = toy_vocab();
        let cfg = small_cfg();
        let enc = encode_typeset("eX", None, &vocab, &cfg);
        assert_eq!(enc.len, 1);
        assert!(enc.types.iter().all(|&t| t == NULL_TYPE_ID));
        assert_eq!(enc.types.len(), cfg.max_types);
    }

    #[test]
    fn decode_round_trips_up_to_unknowns() {
        let vocab = toy_vocab();
        let cfg = small_cfg();
        let rec = SentenceRecord {
            head: "e1".into(),
            tail: "e2".into(),
            relation: "r1".into(),
            tokens: vec!["alpha".into(), "mystery".into(), "delta".into()],
            head_pos: 0,
            tail_pos: 2,
        };
        let enc = encode_sentence(&rec, &vocab, &cfg);
        let decoded = decode_tokens(&vocab, &enc);
        assert_eq!(decoded, vec!["alpha", "<unk>", "delta"]);
    }
}
