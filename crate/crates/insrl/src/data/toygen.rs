//! Desk-scale text-corpus generator.
//!
//! Emits corpus files in the exact ingest format (sentences, descriptions,
//! types, relations). Entities live in a reusable pool and carry a latent
//! profession; a relation holds between a pair exactly when the professions
//! match its pattern and the bag carries the relation's trigger evidence.
//! Signal degrades per sample the way distant supervision degrades: bags may
//! lack their trigger, entity descriptions or type sets may hide the
//! profession, and a share of NA pairs fake one source's signal. Generalizing
//! therefore requires combining sources, not memorizing entities: held-out
//! pairs use fresh entity names.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{CorpusPaths, DescriptionRecord, SentenceRecord, TypeRecord};
use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    /// Non-NA relations; "NA" is always added as relation 0.
    pub n_relations: usize,
    pub n_train_facts: usize,
    pub n_train_na: usize,
    pub n_test_facts: usize,
    pub n_test_na: usize,
    /// Per-source probability that it is the fact's blanked source
    /// (sentences, descriptions, types). At most one source per fact loses
    /// its signal; with probability `1 − Σ` all three keep it.
    pub blank_prob: [f64; 3],
    /// Probability that a kept marker names the wrong relation.
    pub marker_noise: f64,
    pub filler_vocab: usize,
    pub max_fillers_per_side: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            n_relations: 10,
            n_train_facts: 600,
            n_train_na: 300,
            n_test_facts: 150,
            n_test_na: 150,
            blank_prob: [0.45, 0.3, 0.15],
            marker_noise: 0.08,
            filler_vocab: 120,
            max_fillers_per_side: 3,
            seed: 1,
        }
    }
}

pub struct ToyCorpus {
    pub train: CorpusPaths,
    pub test: CorpusPaths,
}

struct Emitter {
    sentences: Vec<SentenceRecord>,
    descriptions: Vec<DescriptionRecord>,
    types: Vec<TypeRecord>,
    next_entity: usize,
}

impl Emitter {
    fn new() -> Self {
        Emitter {
            sentences: Vec::new(),
            descriptions: Vec::new(),
            types: Vec::new(),
            next_entity: 0,
        }
    }

    fn fresh_entity(&mut self, split: &str) -> String {
        let id = self.next_entity;
        self.next_entity += 1;
        format!("{split}_ent{id:05}")
    }
}

fn filler(rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig) -> String {
    format!("w{:03}", rng.gen_range(0..cfg.filler_vocab))
}

/// A kept marker occasionally names the wrong relation.
fn noisy_relation(rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig, relation_idx: usize) -> usize {
    if rng.gen::<f64>() < cfg.marker_noise {
        rng.gen_range(0..cfg.n_relations)
    } else {
        relation_idx
    }
}

fn push_sentence(
    e: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cfg: &ToyCorpusConfig,
    head: &str,
    tail: &str,
    relation: &str,
    trigger: Option<&str>,
) {
    let mut tokens: Vec<String> = Vec::new();
    for _ in 0..rng.gen_range(1..=cfg.max_fillers_per_side) {
        tokens.push(filler(rng, cfg));
    }
    let head_pos = tokens.len();
    tokens.push(head.to_string());
    for _ in 0..rng.gen_range(1..=cfg.max_fillers_per_side) {
        tokens.push(filler(rng, cfg));
    }
    if let Some(t) = trigger {
        tokens.push(t.to_string());
        tokens.push(filler(rng, cfg));
    }
    let tail_pos = tokens.len();
    tokens.push(tail.to_string());
    for _ in 0..rng.gen_range(0..=cfg.max_fillers_per_side) {
        tokens.push(filler(rng, cfg));
    }
    e.sentences.push(SentenceRecord {
        head: head.to_string(),
        tail: tail.to_string(),
        relation: relation.to_string(),
        tokens,
        head_pos,
        tail_pos,
    });
}

fn push_entity_context(
    e: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cfg: &ToyCorpusConfig,
    entity: &str,
    markers: Option<(&str, &str)>, // (description marker, type marker)
) {
    let mut desc: Vec<String> = vec!["the".into(), filler(rng, cfg), entity.to_string()];
    let mut types: Vec<String> = vec![format!("dom{}", rng.gen_range(0..4))];
    match markers {
        Some((dm, tm)) => {
            desc.push(dm.to_string());
            types.push(tm.to_string());
        }
        None => {
            desc.push("role_plain".into());
            types.push("t_plain".into());
        }
    }
    desc.push(filler(rng, cfg));
    if rng.gen::<f64>() < 0.5 {
        types.push(format!("extra{}", rng.gen_range(0..6)));
    }
    e.descriptions.push(DescriptionRecord {
        entity: entity.to_string(),
        tokens: desc,
    });
    e.types.push(TypeRecord {
        entity: entity.to_string(),
        types,
    });
}

fn emit_fact(
    e: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cfg: &ToyCorpusConfig,
    split: &str,
    relation_idx: usize,
) {
    let relation = format!("rel_{relation_idx}");
    let head = e.fresh_entity(split);
    let tail = e.fresh_entity(split);

    // at most one source loses its signal for this fact
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    let mut blanked = None;
    for (j, &p) in cfg.blank_prob.iter().enumerate() {
        acc += p;
        if draw < acc {
            blanked = Some(j);
            break;
        }
    }

    let n_sentences = if rng.gen::<f64>() < 0.8 { 1 } else { 2 };
    for _ in 0..n_sentences {
        let r = noisy_relation(rng, cfg, relation_idx);
        let trig = format!("trig_{r}");
        let trigger = if blanked == Some(0) { None } else { Some(trig.as_str()) };
        push_sentence(e, rng, cfg, &head, &tail, &relation, trigger);
    }

    let head_markers;
    let tail_markers;
    let desc_r = noisy_relation(rng, cfg, relation_idx);
    let type_r = noisy_relation(rng, cfg, relation_idx);
    let (desc_ok, type_ok) = (blanked != Some(1), blanked != Some(2));
    head_markers = (format!("role_subj_{desc_r}"), format!("t_subj_{type_r}"));
    tail_markers = (format!("role_obj_{desc_r}"), format!("t_obj_{type_r}"));
    let pick = |ok_d: bool, ok_t: bool, m: &(String, String)| -> Option<(String, String)> {
        match (ok_d, ok_t) {
            (true, true) => Some((m.0.clone(), m.1.clone())),
            (true, false) => Some((m.0.clone(), "t_plain".into())),
            (false, true) => Some(("role_plain".into(), m.1.clone())),
            (false, false) => None,
        }
    };
    let hm = pick(desc_ok, type_ok, &head_markers);
    let tm = pick(desc_ok, type_ok, &tail_markers);
    push_entity_context(e, rng, cfg, &head, hm.as_ref().map(|(a, b)| (a.as_str(), b.as_str())));
    push_entity_context(e, rng, cfg, &tail, tm.as_ref().map(|(a, b)| (a.as_str(), b.as_str())));
}

fn emit_na(e: &mut Emitter, rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig, split: &str) {
    let head = e.fresh_entity(split);
    let tail = e.fresh_entity(split);
    push_sentence(e, rng, cfg, &head, &tail, "NA", None);
    push_entity_context(e, rng, cfg, &head, None);
    push_entity_context(e, rng, cfg, &tail, None);
}

fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn emit_split(
    e: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cfg: &ToyCorpusConfig,
    split: &str,
    n_facts: usize,
    n_na: usize,
) -> Vec<SentenceRecord> {
    let start = e.sentences.len();
    for i in 0..n_facts {
        emit_fact(e, rng, cfg, split, i % cfg.n_relations);
    }
    for _ in 0..n_na {
        emit_na(e, rng, cfg, split);
    }
    e.sentences.split_off(start)
}

/// Write a train and a test corpus under `dir`. Both splits share one
/// descriptions file, one types file, and one relations file, mirroring the
/// layout of real knowledge-base dumps; only the sentence files differ, and
/// the held-out split draws from its own entity pool.
pub fn write_toy_corpus(dir: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let relations_path = dir.join("relations.txt");
    {
        let mut w = BufWriter::new(File::create(&relations_path)?);
        writeln!(w, "NA")?;
        for i in 0..cfg.n_relations {
            writeln!(w, "rel_{i}")?;
        }
    }

    let mut e = Emitter::new();
    let train_sentences =
        emit_split(&mut e, &mut rng, cfg, "a", cfg.n_train_facts, cfg.n_train_na);
    let test_sentences =
        emit_split(&mut e, &mut rng, cfg, "b", cfg.n_test_facts, cfg.n_test_na);

    let train_path = dir.join("train_sentences.jsonl");
    let test_path = dir.join("test_sentences.jsonl");
    let descriptions_path = dir.join("descriptions.jsonl");
    let types_path = dir.join("types.jsonl");
    write_jsonl(&train_path, &train_sentences)?;
    write_jsonl(&test_path, &test_sentences)?;
    write_jsonl(&descriptions_path, &e.descriptions)?;
    write_jsonl(&types_path, &e.types)?;

    let paths = |sentences: PathBuf| CorpusPaths {
        sentences,
        descriptions: descriptions_path.clone(),
        types: types_path.clone(),
        relations: relations_path.clone(),
    };
    Ok(ToyCorpus {
        train: paths(train_path),
        test: paths(test_path),
    })
}

/// The distinct files of a generated corpus, for manifest hashing.
pub fn all_files(corpus: &ToyCorpus) -> Vec<PathBuf> {
    vec![
        corpus.train.sentences.clone(),
        corpus.test.sentences.clone(),
        corpus.train.descriptions.clone(),
        corpus.train.types.clone(),
        corpus.train.relations.clone(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::load_corpus;

    #[test]
    fn generated_corpus_loads_and_groups() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig {
            n_train_facts: 20,
            n_train_na: 10,
            n_test_facts: 8,
            n_test_na: 8,
            ..ToyCorpusConfig::default()
        };
        let corpus = write_toy_corpus(dir.path(), &cfg).unwrap();
        let train = load_corpus(&corpus.train).unwrap();
        assert!(train.bags.len() >= 30);
        let stats = train.stats();
        assert!(stats.facts >= 20);
        let test = load_corpus(&corpus.test).unwrap();
        assert!(test.stats().facts >= 6);
        // every entity that appears has a description and a type set
        for s in &train.sentences {
            assert!(train.descriptions.contains_key(&s.head));
            assert!(train.types.contains_key(&s.tail));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = ToyCorpusConfig {
            n_train_facts: 10,
            n_train_na: 5,
            n_test_facts: 5,
            n_test_na: 5,
            ..ToyCorpusConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let c1 = write_toy_corpus(d1.path(), &cfg).unwrap();
        let c2 = write_toy_corpus(d2.path(), &cfg).unwrap();
        assert_eq!(
            std::fs::read(&c1.train.sentences).unwrap(),
            std::fs::read(&c2.train.sentences).unwrap()
        );
        assert_eq!(
            std::fs::read(&c1.train.descriptions).unwrap(),
            std::fs::read(&c2.train.descriptions).unwrap()
        );
    }

    #[test]
    fn test_split_uses_fresh_entities() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig {
            n_train_facts: 10,
            n_train_na: 5,
            n_test_facts: 5,
            n_test_na: 5,
            ..ToyCorpusConfig::default()
        };
        let corpus = write_toy_corpus(dir.path(), &cfg).unwrap();
        let train = load_corpus(&corpus.train).unwrap();
        let test = load_corpus(&corpus.test).unwrap();
        for s in &test.sentences {
            assert!(s.head.starts_with("b_") && s.tail.starts_with("b_"));
        }
        for s in &train.sentences {
            assert!(s.head.starts_with("a_") && s.tail.starts_with("a_"));
        }
    }
}
