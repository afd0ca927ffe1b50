//! Word, type, and relation vocabularies with reserved ids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::corpus::RawDataset;
use crate::data::encode::entity_name_tokens;
use crate::error::{Error, Result};

pub const PAD_WORD_ID: usize = 0;
pub const UNK_WORD_ID: usize = 1;
/// The "null" padding type; also the fallback for types unseen at build time.
pub const NULL_TYPE_ID: usize = 0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    pub types: Vec<String>,
    pub relations: Vec<String>,
    #[serde(skip)]
    word_ids: HashMap<String, usize>,
    #[serde(skip)]
    type_ids: HashMap<String, usize>,
    #[serde(skip)]
    relation_ids: HashMap<String, usize>,
}

impl Vocab {
    fn build_indexes(&mut self) {
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        self.type_ids = self
            .types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.relation_ids = self
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.word_ids.get(word).copied().unwrap_or(UNK_WORD_ID)
    }

    pub fn type_id(&self, ty: &str) -> usize {
        self.type_ids.get(ty).copied().unwrap_or(NULL_TYPE_ID)
    }

    pub fn relation_id(&self, rel: &str) -> Option<usize> {
        self.relation_ids.get(rel).copied()
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = File::open(path)?;
        let mut vocab: Vocab = serde_json::from_reader(BufReader::new(f))?;
        vocab.build_indexes();
        Ok(vocab)
    }
}

/// Count-sort helper: frequency descending, then lexicographic ascending.
fn sorted_by_freq(counts: HashMap<String, usize>, min_count: usize) -> Vec<String> {
    let mut items: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().map(|(w, _)| w).collect()
}

/// Deterministic vocabulary construction. Words come from sentences,
/// descriptions, and the pseudo-descriptions of undescribed entities; words
/// below `min_count` map to the unknown id. Relation ids follow the relations
/// file order (id 0 = NA).
pub fn build_vocab(dataset: &RawDataset, min_count: usize) -> Vocab {
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    let mut count = |tok: &str| {
        *word_counts.entry(tok.to_string()).or_insert(0) += 1;
    };
    let mut entities: Vec<&str> = Vec::new();
    for s in &dataset.sentences {
        for t in &s.tokens {
            count(t);
        }
        entities.push(&s.head);
        entities.push(&s.tail);
    }
    for tokens in dataset.descriptions.values() {
        for t in tokens {
            count(t);
        }
    }
    entities.sort_unstable();
    entities.dedup();
    for e in entities {
        if !dataset.descriptions.contains_key(e) {
            for t in entity_name_tokens(e) {
                count(&t);
            }
        }
    }

    let mut type_counts: HashMap<String, usize> = HashMap::new();
    for types in dataset.types.values() {
        for t in types {
            *type_counts.entry(t.clone()).or_insert(0) += 1;
        }
    }

    let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
    words.extend(sorted_by_freq(word_counts, min_count.max(1)));
    let mut types = vec!["null".to_string()];
    types.extend(
        sorted_by_freq(type_counts, 1)
            .into_iter()
            .filter(|t| t != "null"),
    );

    let mut vocab = Vocab {
        words,
        types,
        relations: dataset.relations.clone(),
        word_ids: HashMap::new(),
        type_ids: HashMap::new(),
        relation_ids: HashMap::new(),
    };
    vocab.build_indexes();
    vocab
}

/// Pretrained word vectors: one `word v1 ... vd` line each.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let mut vectors = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap().to_string();
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("bad vector component '{p}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected {dim} components, found {}", values.len()),
            });
        }
        vectors.insert(word, values);
    }
    Ok(vectors)
}
