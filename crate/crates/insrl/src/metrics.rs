//! Held-out evaluation: precision-recall curves, area under them, and max F1.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ranked prediction: an entity pair, a non-NA relation, and its score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair: String,
    pub relation: usize,
    pub score: f64,
}

/// Gold facts from the held-out knowledge base. Never contains NA.
#[derive(Clone, Debug, Default)]
pub struct FactSet {
    facts: BTreeSet<(String, usize)>,
}

impl FactSet {
    pub fn new() -> Self {
        FactSet::default()
    }

    pub fn insert(&mut self, pair: String, relation: usize) {
        assert!(relation != 0, "NA is not a fact");
        self.facts.insert((pair, relation));
    }

    pub fn contains(&self, pair: &str, relation: usize) -> bool {
        self.facts.contains(&(pair.to_string(), relation))
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Precision-recall points, one per prefix of the ranked prediction list.
/// Ties in score break by pair id then relation id, so the curve is a pure
/// function of the prediction multiset.
pub fn pr_curve(preds: &[PredictionRecord], gold: &FactSet) -> Result<Vec<(f64, f64)>> {
    if gold.is_empty() {
        return Err(Error::Eval("gold fact set is empty".into()));
    }
    if preds.is_empty() {
        return Err(Error::Eval("no predictions to rank".into()));
    }
    let mut ranked: Vec<&PredictionRecord> = preds.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.pair.cmp(&b.pair))
            .then_with(|| a.relation.cmp(&b.relation))
    });

    let total = gold.len() as f64;
    let mut hits = 0usize;
    let mut seen: BTreeSet<(&str, usize)> = BTreeSet::new();
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, p) in ranked.iter().enumerate() {
        if gold.contains(&p.pair, p.relation) && seen.insert((p.pair.as_str(), p.relation)) {
            hits += 1;
        }
        let precision = hits as f64 / (k + 1) as f64;
        let recall = hits as f64 / total;
        curve.push((recall, precision));
    }
    Ok(curve)
}

/// Area under the precision-recall curve by trapezoid over recall, with the
/// curve extended to `(0, p₁)` on the left.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Eval("empty curve".into()));
    }
    let mut area = 0.0;
    let (mut prev_r, mut prev_p) = (0.0, curve[0].1);
    for &(r, p) in curve {
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(area)
}

/// Best F1 over the curve points; `0/0` counts as 0.
pub fn max_f1(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Eval("empty curve".into()));
    }
    Ok(curve
        .iter()
        .map(|&(r, p)| {
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: f64,
    pub max_f1: f64,
    pub predictions: usize,
    pub gold_facts: usize,
}

/// Full evaluation of a ranked prediction list, optionally truncated to the
/// top `k` predictions for curve comparison.
pub fn evaluate(
    preds: &[PredictionRecord],
    gold: &FactSet,
    top_k: Option<usize>,
) -> Result<(Vec<(f64, f64)>, EvalMetrics)> {
    let mut curve = pr_curve(preds, gold)?;
    if let Some(k) = top_k {
        curve.truncate(k.max(1));
    }
    let metrics = EvalMetrics {
        auc: auc(&curve)?,
        max_f1: max_f1(&curve)?,
        predictions: preds.len(),
        gold_facts: gold.len(),
    };
    Ok((curve, metrics))
}

pub fn write_pr_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "recall,precision")?;
    for (r, p) in curve {
        writeln!(w, "{r},{p}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pr_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let f = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let mut curve = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "recall,precision" {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: "expected header 'recall,precision'".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok()).ok_or(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected two comma-separated numbers".into(),
            })
        };
        let r = parse(parts.next())?;
        let p = parse(parts.next())?;
        curve.push((r, p));
    }
    Ok(curve)
}
