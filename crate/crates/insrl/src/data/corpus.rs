//! Line-delimited JSON corpus files and bag grouping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled sentence: `{"head", "tail", "relation", "tokens", "head_pos", "tail_pos"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub head: String,
    pub tail: String,
    pub relation: String,
    pub tokens: Vec<String>,
    pub head_pos: usize,
    pub tail_pos: usize,
}

/// `{"entity", "tokens"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub entity: String,
    pub tokens: Vec<String>,
}

/// `{"entity", "types"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeRecord {
    pub entity: String,
    pub types: Vec<String>,
}

/// Input file locations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub sentences: PathBuf,
    pub descriptions: PathBuf,
    pub types: PathBuf,
    pub relations: PathBuf,
}

/// One training bag: every sentence for a `(pair, relation)` key.
/// A pair with k distinct relations yields k bags.
#[derive(Clone, Debug)]
pub struct RawBag {
    pub head: String,
    pub tail: String,
    pub relation: usize,
    pub sentence_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RawDataset {
    pub sentences: Vec<SentenceRecord>,
    pub descriptions: HashMap<String, Vec<String>>,
    pub types: HashMap<String, Vec<String>>,
    pub relations: Vec<String>,
    pub bags: Vec<RawBag>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub entity_pairs: usize,
    pub facts: usize,
    pub bags: usize,
    pub entities: usize,
    pub mean_types_per_entity: f64,
    pub described_entities: usize,
}

impl RawDataset {
    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    /// Counts for sanity logging.
    pub fn stats(&self) -> CorpusStats {
        let mut pairs = BTreeSet::new();
        let mut facts = BTreeSet::new();
        let mut entities = BTreeSet::new();
        for s in &self.sentences {
            pairs.insert((s.head.as_str(), s.tail.as_str()));
            entities.insert(s.head.as_str());
            entities.insert(s.tail.as_str());
            if s.relation != "NA" {
                facts.insert((s.head.as_str(), s.tail.as_str(), s.relation.as_str()));
            }
        }
        let typed: usize = entities
            .iter()
            .map(|e| self.types.get(*e).map_or(0, |t| t.len()))
            .sum();
        let described = entities
            .iter()
            .filter(|e| self.descriptions.contains_key(**e))
            .count();
        CorpusStats {
            sentences: self.sentences.len(),
            entity_pairs: pairs.len(),
            facts: facts.len(),
            bags: self.bags.len(),
            entities: entities.len(),
            mean_types_per_entity: if entities.is_empty() {
                0.0
            } else {
                typed as f64 / entities.len() as f64
            },
            described_entities: described,
        }
    }
}

fn read_jsonl<R, F>(path: &Path, mut handle: F) -> Result<()>
where
    R: for<'de> Deserialize<'de>,
    F: FnMut(usize, R) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: R = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: e.to_string(),
        })?;
        handle(line_no, record)?;
    }
    Ok(())
}

/// Relations file: plain text, one relation per line, line 0 must be "NA".
pub fn load_relations(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let mut relations = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let name = line.trim();
        if !name.is_empty() {
            relations.push(name.to_string());
        }
    }
    if relations.first().map(String::as_str) != Some("NA") {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "first relation must be \"NA\"".into(),
        });
    }
    let mut seen = BTreeSet::new();
    for r in &relations {
        if !seen.insert(r.as_str()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: format!("duplicate relation '{r}'"),
            });
        }
    }
    Ok(relations)
}

/// Load all corpus files, validate records, and group sentences into bags
/// keyed by `(pair, relation)` in sorted key order.
pub fn load_corpus(paths: &CorpusPaths) -> Result<RawDataset> {
    let relations = load_relations(&paths.relations)?;
    let relation_ids: HashMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();

    let mut sentences: Vec<SentenceRecord> = Vec::new();
    let sent_path = paths.sentences.display().to_string();
    read_jsonl::<SentenceRecord, _>(&paths.sentences, |line, rec| {
        if rec.tokens.is_empty() {
            return Err(Error::Parse {
                path: sent_path.clone(),
                line,
                msg: "sentence has no tokens".into(),
            });
        }
        if rec.head_pos >= rec.tokens.len() || rec.tail_pos >= rec.tokens.len() {
            return Err(Error::Parse {
                path: sent_path.clone(),
                line,
                msg: format!(
                    "entity position out of range (head {}, tail {}, {} tokens)",
                    rec.head_pos,
                    rec.tail_pos,
                    rec.tokens.len()
                ),
            });
        }
        if !relation_ids.contains_key(rec.relation.as_str()) {
            return Err(Error::Parse {
                path: sent_path.clone(),
                line,
                msg: format!("unknown relation '{}'", rec.relation),
            });
        }
        sentences.push(rec);
        Ok(())
    })?;

    let mut descriptions = HashMap::new();
    read_jsonl::<DescriptionRecord, _>(&paths.descriptions, |_, rec| {
        descriptions.insert(rec.entity, rec.tokens);
        Ok(())
    })?;

    let mut types = HashMap::new();
    read_jsonl::<TypeRecord, _>(&paths.types, |_, rec| {
        types.insert(rec.entity, rec.types);
        Ok(())
    })?;

    // Group by (head, tail, relation); BTreeMap gives a stable bag order.
    let mut groups: BTreeMap<(String, String, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in sentences.iter().enumerate() {
        let rid = relation_ids[s.relation.as_str()];
        groups
            .entry((s.head.clone(), s.tail.clone(), rid))
            .or_default()
            .push(i);
    }
    let bags = groups
        .into_iter()
        .map(|((head, tail, relation), sentence_indices)| RawBag {
            head,
            tail,
            relation,
            sentence_indices,
        })
        .collect();

    Ok(RawDataset {
        sentences,
        descriptions,
        types,
        relations,
        bags,
    })
}

/// Group sentences per pair (relation-agnostic) for held-out evaluation, and
/// collect the non-NA gold relations of each pair.
pub fn group_eval_pairs(dataset: &RawDataset) -> Vec<(String, String, Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<(String, String), (Vec<usize>, BTreeSet<usize>)> = BTreeMap::new();
    for (i, s) in dataset.sentences.iter().enumerate() {
        let rid = dataset
            .relation_id(&s.relation)
            .expect("validated at load");
        let entry = groups
            .entry((s.head.clone(), s.tail.clone()))
            .or_default();
        entry.0.push(i);
        if rid != 0 {
            entry.1.insert(rid);
        }
    }
    groups
        .into_iter()
        .map(|((h, t), (idx, gold))| (h, t, idx, gold.into_iter().collect()))
        .collect()
}
