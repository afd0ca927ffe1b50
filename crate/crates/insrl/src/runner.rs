//! Pipeline orchestration shared by the command-line tools, the ablation
//! harness, and the acceptance experiments: load corpora, build
//! vocabularies, encode, train, evaluate.

use std::collections::HashMap;

use crate::checkpoint;
use crate::config::Config;
use crate::data::{
    build_vocab, encode_dataset, encode_eval_pairs, load_corpus, load_word_vectors,
    CorpusStats, EntityPairSample, EvalPair, RawDataset, Vocab,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalMetrics, PredictionRecord};
use crate::model::{
    build_text_model, predict_pairs, train, Dataset, EpochStats, Model,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub struct RawCorpora {
    pub train: RawDataset,
    pub test: RawDataset,
}

pub fn load_corpora(cfg: &Config) -> Result<RawCorpora> {
    let train = load_corpus(&cfg.data.corpus_paths("train")?)?;
    let test = load_corpus(&cfg.data.corpus_paths("test")?)?;
    Ok(RawCorpora { train, test })
}

pub struct PreparedText {
    pub vocab: Vocab,
    pub train: Vec<EntityPairSample>,
    pub eval_pairs: Vec<EvalPair>,
    pub position_vocab: usize,
    pub train_stats: CorpusStats,
    pub test_stats: CorpusStats,
}

/// Vocabulary from the training split, then fixed-length encoding of both
/// splits. Seed-dependent pieces (type discard, bag caps) use `seed`.
pub fn encode_corpora(raw: &RawCorpora, cfg: &Config, seed: u64) -> Result<PreparedText> {
    let enc = cfg.data.encode_config(seed);
    let vocab = build_vocab(&raw.train, cfg.data.min_count);
    let train = encode_dataset(&raw.train, &vocab, &enc);
    let eval_pairs = encode_eval_pairs(&raw.test, &vocab, &enc);
    Ok(PreparedText {
        vocab,
        train,
        eval_pairs,
        position_vocab: enc.position_vocab(),
        train_stats: raw.train.stats(),
        test_stats: raw.test.stats(),
    })
}

pub fn load_pretrained(cfg: &Config) -> Result<Option<HashMap<String, Vec<f64>>>> {
    match &cfg.data.word_vectors {
        Some(path) => Ok(Some(load_word_vectors(path, cfg.model.d_word)?)),
        None => Ok(None),
    }
}

/// Train one text model from prepared data.
pub fn train_text<T: Scalar, F>(
    cfg: &Config,
    prepared: &PreparedText,
    pretrained: Option<&HashMap<String, Vec<f64>>>,
    seed: u64,
    on_epoch: F,
) -> Result<(Model<T>, Vec<EpochStats>)>
where
    F: FnMut(&EpochStats, &ParamStore<T>) -> Result<()>,
{
    let mut model = build_text_model::<T>(
        &cfg.model,
        &prepared.vocab,
        prepared.position_vocab,
        pretrained,
        seed,
    )?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let data = Dataset::Text(prepared.train.clone());
    let log = train(&mut model, &data, &tc, on_epoch)?;
    Ok((model, log))
}

/// Score the held-out pairs and compute the ranked-list metrics.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    eval_pairs: &[EvalPair],
    top_k: Option<usize>,
) -> Result<(Vec<(f64, f64)>, EvalMetrics, Vec<PredictionRecord>)> {
    if eval_pairs.is_empty() {
        return Err(Error::Eval("no held-out pairs to score".into()));
    }
    let (records, facts) = predict_pairs(model, eval_pairs)?;
    let (curve, metrics) = evaluate(&records, &facts, top_k)?;
    Ok((curve, metrics, records))
}

/// One full run for suite-style experiments: encode with the run seed,
/// train, evaluate. Returns the held-out metrics.
pub fn run_text_once<T: Scalar>(
    cfg: &Config,
    raw: &RawCorpora,
    pretrained: Option<&HashMap<String, Vec<f64>>>,
    seed: u64,
) -> Result<EvalMetrics> {
    let prepared = encode_corpora(raw, cfg, seed)?;
    let (model, _) = train_text::<T, _>(cfg, &prepared, pretrained, seed, |_, _| Ok(()))?;
    let (_, metrics, _) = evaluate_model(&model, &prepared.eval_pairs, None)?;
    Ok(metrics)
}

/// Rebuild a model skeleton and fill it from a checkpoint.
pub fn load_text_model<T: Scalar>(
    cfg: &Config,
    prepared: &PreparedText,
    checkpoint_path: &std::path::Path,
) -> Result<Model<T>> {
    let mut model = build_text_model::<T>(
        &cfg.model,
        &prepared.vocab,
        prepared.position_vocab,
        None,
        0,
    )?;
    checkpoint::load_into(&mut model.store, checkpoint_path)?;
    Ok(model)
}
