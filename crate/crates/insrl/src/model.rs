//! Relation classifier over intact vectors: end-to-end forward pass,
//! SGD training loop, and inference-time scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DataKind, InferenceQuery, ModelConfig, TrainConfig};
use crate::data::{EncodedDescription, EncodedSentence, EncodedTypeSet};
use crate::data::{EntityPairSample, EvalPair, FeatureSample, Vocab};
use crate::encoders::{
    init_embedding_tables, init_encoder, srl_forward, srl_forward_description, trl_forward,
    EmbeddingTables, EncoderParams, Pooling,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, init_fusion_params, reconstruction_loss, uniform_gammas, FusionParams,
};
use crate::metrics::{FactSet, PredictionRecord};
use crate::params::{init, sgd_step, Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;
use crate::views::{bag_attention, description_view, init_view_params, type_view, ViewParams};

/// Samples processed per work unit during a batch. Fixed so that gradient
/// reduction order does not depend on the thread count.
const PAR_CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct TextEncoders {
    pub tables: EmbeddingTables,
    pub sentence: EncoderParams,
    pub description: EncoderParams,
    pub type_head: EncoderParams,
    pub type_tail: EncoderParams,
    pub views: ViewParams,
}

/// Everything about a model except the parameter values: ids, dimensions,
/// and behavioral settings. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Wiring {
    pub cfg: ModelConfig,
    pub text: Option<TextEncoders>,
    pub fusion: FusionParams,
    /// Relation embedding matrix `[n, d_model]`, shared by the attention
    /// query, the bag query, and the classifier.
    pub relations: ParamId,
    /// Bilinear classifier map `[d_model, d_intact]`.
    pub classifier: ParamId,
    pub n_relations: usize,
}

pub struct Model<T> {
    pub store: ParamStore<T>,
    pub wiring: Wiring,
}

/// Sources for the three read paths of the relation embeddings. Tests freeze
/// individual paths (constant copies) to split the gradient by path; normal
/// operation leaves everything live.
#[derive(Clone, Debug, Default)]
pub struct RSources<T> {
    pub r_hat: Option<Tensor<T>>,
    pub bag_query: Option<Tensor<T>>,
    pub classifier: Option<Tensor<T>>,
}

impl<T: Scalar> RSources<T> {
    pub fn live() -> Self {
        RSources::default()
    }
}

/// Build the full text model: embedding tables, four encoder instances,
/// view combiners, fusion, and classifier.
pub fn build_text_model<T: Scalar>(
    cfg: &ModelConfig,
    vocab: &Vocab,
    position_vocab: usize,
    pretrained: Option<&std::collections::HashMap<String, Vec<f64>>>,
    seed: u64,
) -> Result<Model<T>> {
    cfg.validate()?;
    let dims = cfg.encoder_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    let tables = init_embedding_tables(
        &mut store,
        &mut rng,
        &dims,
        &vocab.words,
        vocab.n_types(),
        position_vocab,
        pretrained,
    );
    let sentence = init_encoder(&mut store, &mut rng, "enc.sent", &dims, true);
    let description = if cfg.share_description_encoder {
        sentence.clone()
    } else {
        init_encoder(&mut store, &mut rng, "enc.desc", &dims, true)
    };
    let type_head = init_encoder(&mut store, &mut rng, "enc.type_head", &dims, false);
    let type_tail = init_encoder(&mut store, &mut rng, "enc.type_tail", &dims, false);
    let views = init_view_params(&mut store, &mut rng, cfg.d_model);
    let fusion = init_fusion_params(&mut store, &mut rng, cfg.d_model, cfg.d_intact);
    let n = vocab.n_relations();
    let relations = store.add("relations", init::gaussian(&mut rng, &[n, cfg.d_model], 0.1));
    let classifier = store.add(
        "classifier.bilinear",
        init::xavier(
            &mut rng,
            &[cfg.d_model, cfg.d_intact],
            cfg.d_intact,
            cfg.d_model,
        ),
    );

    Ok(Model {
        store,
        wiring: Wiring {
            cfg: cfg.clone(),
            text: Some(TextEncoders {
                tables,
                sentence,
                description,
                type_head,
                type_tail,
                views,
            }),
            fusion,
            relations,
            classifier,
            n_relations: n,
        },
    })
}

/// Build the fusion + classifier model over precomputed view vectors.
/// `d_model` must equal the feature dimensionality of the dataset.
pub fn build_feature_model<T: Scalar>(
    cfg: &ModelConfig,
    n_relations: usize,
    seed: u64,
) -> Result<Model<T>> {
    cfg.validate()?;
    if n_relations < 2 {
        return Err(Error::Config("need at least 2 relations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fusion = init_fusion_params(&mut store, &mut rng, cfg.d_model, cfg.d_intact);
    let relations = store.add(
        "relations",
        init::gaussian(&mut rng, &[n_relations, cfg.d_model], 0.1),
    );
    let classifier = store.add(
        "classifier.bilinear",
        init::xavier(
            &mut rng,
            &[cfg.d_model, cfg.d_intact],
            cfg.d_intact,
            cfg.d_model,
        ),
    );
    Ok(Model {
        store,
        wiring: Wiring {
            cfg: cfg.clone(),
            text: None,
            fusion,
            relations,
            classifier,
            n_relations,
        },
    })
}

/// Training data: encoded text bags or precomputed feature views.
#[derive(Clone, Debug)]
pub enum Dataset {
    Text(Vec<EntityPairSample>),
    Features(Vec<FeatureSample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Text(v) => v.len(),
            Dataset::Features(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DataKind {
        match self {
            Dataset::Text(_) => DataKind::Text,
            Dataset::Features(_) => DataKind::Features,
        }
    }

    pub fn gold(&self, idx: usize) -> usize {
        match self {
            Dataset::Text(v) => v[idx].relation,
            Dataset::Features(v) => v[idx].label,
        }
    }
}

// ── forward building blocks ──────────────────────────────────────────

fn r_hat_buf<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Wiring,
    sources: &RSources<T>,
) -> Result<BufId> {
    let r = match &sources.r_hat {
        None => tape.param(w.relations),
        Some(frozen) => tape.constant(frozen.clone()),
    };
    tape.mean_rows(r, w.n_relations)
}

fn bag_query_buf<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Wiring,
    sources: &RSources<T>,
    relation: usize,
) -> Result<BufId> {
    let r = match &sources.bag_query {
        None => tape.param(w.relations),
        Some(frozen) => tape.constant(frozen.clone()),
    };
    tape.gather_rows(r, &[relation])
}

/// Classifier logits `[1, n]`: every relation embedding scored against the
/// intact vector through the bilinear map.
fn logits_buf<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Wiring,
    sources: &RSources<T>,
    x: BufId,
) -> Result<BufId> {
    let m2 = tape.param(w.classifier);
    let projected = tape.matmul_tb(x, m2)?;
    let r = match &sources.classifier {
        None => tape.param(w.relations),
        Some(frozen) => tape.constant(frozen.clone()),
    };
    tape.matmul_tb(projected, r)
}

/// Softmax class probabilities for an intact vector.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Wiring,
    x: BufId,
) -> Result<BufId> {
    let logits = logits_buf(tape, w, &RSources::live(), x)?;
    tape.row_softmax(logits, tape.shape(logits)[1])
}

/// Encode every sentence of a bag into its vector (query-independent).
fn bag_sentence_vectors<T: Scalar>(
    tape: &mut Tape<T>,
    te: &TextEncoders,
    w: &Wiring,
    bag: &[EncodedSentence],
    r_hat: BufId,
    pooling: Pooling,
) -> Result<Vec<BufId>> {
    if bag.is_empty() {
        return Err(Error::EmptyInput("sentence bag"));
    }
    let dims = w.cfg.encoder_dims();
    bag.iter()
        .map(|s| srl_forward(tape, &te.sentence, &te.tables, &dims, s, r_hat, pooling))
        .collect()
}

struct PairInputs<'a> {
    descriptions: &'a (EncodedDescription, EncodedDescription),
    types: &'a (EncodedTypeSet, EncodedTypeSet),
}

impl<'a> From<&'a EntityPairSample> for PairInputs<'a> {
    fn from(s: &'a EntityPairSample) -> Self {
        PairInputs {
            descriptions: &s.descriptions,
            types: &s.types,
        }
    }
}

impl<'a> From<&'a EvalPair> for PairInputs<'a> {
    fn from(s: &'a EvalPair) -> Self {
        PairInputs {
            descriptions: &s.descriptions,
            types: &s.types,
        }
    }
}

/// Description and type views (query-independent). Returns buffers for the
/// enabled ones among views 2 and 3.
fn context_views<T: Scalar>(
    tape: &mut Tape<T>,
    te: &TextEncoders,
    w: &Wiring,
    inputs: &PairInputs,
    r_hat: BufId,
    pooling: Pooling,
) -> Result<Vec<(usize, BufId)>> {
    let dims = w.cfg.encoder_dims();
    let mut out = Vec::new();
    if w.cfg.views[1] {
        let d1 = srl_forward_description(
            tape,
            &te.description,
            &te.tables,
            &dims,
            &inputs.descriptions.0,
            r_hat,
            pooling,
        )?;
        let d2 = srl_forward_description(
            tape,
            &te.description,
            &te.tables,
            &dims,
            &inputs.descriptions.1,
            r_hat,
            pooling,
        )?;
        let v2 = description_view(tape, d1, d2, te.views.desc_combine, te.views.desc_bias)?;
        out.push((1, v2));
    }
    if w.cfg.views[2] {
        let c1 = trl_forward(
            tape,
            &te.type_head,
            &te.tables,
            &dims,
            &inputs.types.0,
            r_hat,
            pooling,
        )?;
        let c2 = trl_forward(
            tape,
            &te.type_tail,
            &te.tables,
            &dims,
            &inputs.types.1,
            r_hat,
            pooling,
        )?;
        let v3 = type_view(tape, c1, c2, te.views.type_combine, te.views.type_bias)?;
        out.push((2, v3));
    }
    Ok(out)
}

fn feature_views<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Wiring,
    sample: &FeatureSample,
) -> Vec<(usize, BufId)> {
    (0..3)
        .filter(|&j| w.cfg.views[j])
        .map(|j| (j, tape.constant(Tensor::row_from_f64(sample.view(j)))))
        .collect()
}

fn split_views(pairs: Vec<(usize, BufId)>) -> (Vec<usize>, Vec<BufId>) {
    pairs.into_iter().unzip()
}

/// Forward output of one training sample.
pub struct SampleForward {
    pub loss: BufId,
    /// Attention weights over the present views, when the strategy has them.
    pub gammas: Option<BufId>,
}

/// Full training forward: encoders → views (gold query) → fusion →
/// classifier cross-entropy, plus the optional reconstruction term.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store_wiring: &Wiring,
    dataset: &Dataset,
    idx: usize,
    lambda: f64,
    sources: &RSources<T>,
) -> Result<SampleForward> {
    let w = store_wiring;
    let r_hat = r_hat_buf(tape, w, sources)?;
    let gold = dataset.gold(idx);
    if gold >= w.n_relations {
        return Err(Error::IndexOutOfRange {
            what: "relation label",
            index: gold,
            size: w.n_relations,
        });
    }

    let view_pairs = match dataset {
        Dataset::Text(samples) => {
            let sample = &samples[idx];
            let te = w.text.as_ref().ok_or_else(|| {
                Error::Config("text dataset requires a text model".into())
            })?;
            let pooling = w.cfg.pooling.into();
            let mut pairs = Vec::new();
            if w.cfg.views[0] {
                let vecs = bag_sentence_vectors(tape, te, w, &sample.bag, r_hat, pooling)?;
                let query = bag_query_buf(tape, w, sources, sample.relation)?;
                let v1 = bag_attention(tape, &vecs, query, te.views.bag_diag)?;
                pairs.push((0, v1));
            }
            let inputs = PairInputs::from(sample);
            pairs.extend(context_views(tape, te, w, &inputs, r_hat, pooling)?);
            pairs
        }
        Dataset::Features(samples) => feature_views(tape, w, &samples[idx]),
    };
    let (present, views) = split_views(view_pairs);

    let (x, gammas) = fuse(
        tape,
        w.cfg.fusion,
        w.cfg.fusion_form,
        &views,
        &present,
        &w.fusion,
        r_hat,
        w.cfg.ridge,
    )?;
    let logits = logits_buf(tape, w, sources, x)?;
    let mut loss = tape.cross_entropy(logits, gold)?;

    if lambda > 0.0 {
        let gam = match gammas {
            Some(g) => g,
            None => uniform_gammas(tape, views.len()),
        };
        let gen: Vec<ParamId> = present.iter().map(|&j| w.fusion.view_gen[j]).collect();
        let recon = reconstruction_loss(tape, &views, x, gam, &gen)?;
        let weighted = tape.scale(recon, lambda)?;
        loss = tape.add(loss, weighted)?;
    }

    Ok(SampleForward { loss, gammas })
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Mean (over batches) L2 norm of the averaged batch gradient.
    pub grad_norm: f64,
    /// Mean attention weight per present view, when the strategy emits them.
    pub gamma_mean: Option<Vec<f64>>,
}

/// Plain SGD over shuffled batches. Deterministic for a fixed seed: the
/// shuffle stream, the chunked gradient reduction, and the update order are
/// all independent of thread scheduling.
pub fn train<T: Scalar, F>(
    model: &mut Model<T>,
    data: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&EpochStats, &ParamStore<T>) -> Result<()>,
{
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let n = data.len();
    let lambda = tc.lambda_reconstruction;
    let lr = T::from_f64(tc.learning_rate);
    let clip = tc.clip_norm.map(T::from_f64);
    let n_views = model.wiring.cfg.present_views().len();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        let mut gamma_sum = vec![0.0f64; n_views];
        let mut gamma_count = 0usize;

        for batch in order.chunks(tc.batch_size) {
            let wiring = &model.wiring;
            let store = &model.store;
            let chunk_results: Vec<Result<ChunkResult<T>>> = batch
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    let mut grads = Gradients::zeros_like(store);
                    let mut loss_sum = 0.0;
                    let mut gamma = vec![0.0f64; n_views];
                    let mut gamma_n = 0usize;
                    for &idx in chunk {
                        let mut tape = Tape::new(store);
                        let fwd = sample_loss(
                            &mut tape,
                            wiring,
                            data,
                            idx,
                            lambda,
                            &RSources::live(),
                        )?;
                        loss_sum += tape.scalar(fwd.loss).to_f64_lossy();
                        if let Some(g) = fwd.gammas {
                            for (acc, v) in gamma.iter_mut().zip(tape.data(g)) {
                                *acc += v.to_f64_lossy();
                            }
                            gamma_n += 1;
                        }
                        tape.backward(fwd.loss, &mut grads)?;
                    }
                    Ok(ChunkResult {
                        grads,
                        loss_sum,
                        gamma,
                        gamma_n,
                    })
                })
                .collect();

            let mut total = Gradients::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for res in chunk_results {
                let c = res?;
                total.merge(&c.grads);
                batch_loss += c.loss_sum;
                for (acc, v) in gamma_sum.iter_mut().zip(&c.gamma) {
                    *acc += v;
                }
                gamma_count += c.gamma_n;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {batch_loss} in epoch {epoch}; offending batch indices {batch:?}"
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            total.scale(T::from_f64(1.0 / batch.len() as f64));
            norm_sum += total.l2_norm().to_f64_lossy();
            batches += 1;
            sgd_step(&mut model.store, &total, lr, clip);
        }

        let stats = EpochStats {
            epoch,
            loss: epoch_loss / n as f64,
            grad_norm: norm_sum / batches as f64,
            gamma_mean: (gamma_count > 0).then(|| {
                gamma_sum.iter().map(|g| g / gamma_count as f64).collect()
            }),
        };
        on_epoch(&stats, &model.store)?;
        log.push(stats);
    }
    Ok(log)
}

struct ChunkResult<T> {
    grads: Gradients<T>,
    loss_sum: f64,
    gamma: Vec<f64>,
    gamma_n: usize,
}

// ── inference ────────────────────────────────────────────────────────

/// Probabilities over all relations for a feature sample.
pub fn score_features<T: Scalar>(model: &Model<T>, sample: &FeatureSample) -> Result<Vec<f64>> {
    let w = &model.wiring;
    let mut tape = Tape::new(&model.store);
    let r_hat = r_hat_buf(&mut tape, w, &RSources::live())?;
    let (present, views) = split_views(feature_views(&mut tape, w, sample));
    let (x, _) = fuse(
        &mut tape,
        w.cfg.fusion,
        w.cfg.fusion_form,
        &views,
        &present,
        &w.fusion,
        r_hat,
        w.cfg.ridge,
    )?;
    let probs = classify(&mut tape, w, x)?;
    Ok(tape.value(probs).to_f64_vec())
}

/// Fraction of feature samples whose argmax probability hits the label.
pub fn feature_accuracy<T: Scalar>(model: &Model<T>, samples: &[FeatureSample]) -> Result<f64> {
    let hits: Result<Vec<bool>> = samples
        .par_iter()
        .map(|s| {
            let probs = score_features(model, s)?;
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Ok(argmax == s.label)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len().max(1) as f64)
}

/// Score every candidate relation for one held-out pair.
///
/// The sentence encodings and the description/type views are query-independent
/// and computed once. Under the per-relation policy, bag attention, fusion,
/// and the classifier rerun per candidate `k` and the score is `p(k | x⁽ᵏ⁾)`;
/// under the global policy (or when the bag collapses: one sentence, or view 1
/// disabled) a single softmax row provides all scores.
pub fn score_all_relations<T: Scalar>(
    model: &Model<T>,
    inputs: &EvalPair,
) -> Result<Vec<f64>> {
    let w = &model.wiring;
    let te = w
        .text
        .as_ref()
        .ok_or_else(|| Error::Config("text scoring requires a text model".into()))?;
    if w.cfg.views[0] && inputs.bag.is_empty() {
        return Err(Error::EmptyInput("sentence bag"));
    }
    let pooling = w.cfg.pooling.into();
    let mut tape = Tape::new(&model.store);
    let r_hat = r_hat_buf(&mut tape, w, &RSources::live())?;

    let sentence_vecs = if w.cfg.views[0] {
        bag_sentence_vectors(&mut tape, te, w, &inputs.bag, r_hat, pooling)?
    } else {
        Vec::new()
    };
    let pair_inputs = PairInputs::from(inputs);
    let ctx = context_views(&mut tape, te, w, &pair_inputs, r_hat, pooling)?;

    let single_pass = !w.cfg.views[0]
        || sentence_vecs.len() == 1
        || w.cfg.inference_query == InferenceQuery::Global;

    let score_with_query = |tape: &mut Tape<T>, query: BufId| -> Result<BufId> {
        let mut pairs = Vec::new();
        if w.cfg.views[0] {
            let v1 = bag_attention(tape, &sentence_vecs, query, te.views.bag_diag)?;
            pairs.push((0, v1));
        }
        pairs.extend(ctx.iter().copied());
        let (present, views) = split_views(pairs);
        let (x, _) = fuse(
            tape,
            w.cfg.fusion,
            w.cfg.fusion_form,
            &views,
            &present,
            &w.fusion,
            r_hat,
            w.cfg.ridge,
        )?;
        classify(tape, w, x)
    };

    if single_pass {
        let probs = score_with_query(&mut tape, r_hat)?;
        Ok(tape.value(probs).to_f64_vec())
    } else {
        let mut scores = Vec::with_capacity(w.n_relations);
        for k in 0..w.n_relations {
            let query = bag_query_buf(&mut tape, w, &RSources::live(), k)?;
            let probs = score_with_query(&mut tape, query)?;
            scores.push(tape.data(probs)[k].to_f64_lossy());
        }
        Ok(scores)
    }
}

/// Score held-out pairs and assemble ranked predictions (non-NA relations
/// only) together with the gold fact set.
pub fn predict_pairs<T: Scalar>(
    model: &Model<T>,
    pairs: &[EvalPair],
) -> Result<(Vec<PredictionRecord>, FactSet)> {
    let scored: Result<Vec<Vec<f64>>> = pairs
        .par_iter()
        .map(|p| score_all_relations(model, p))
        .collect();
    let scored = scored?;
    let mut records = Vec::new();
    let mut facts = FactSet::new();
    for (pair, scores) in pairs.iter().zip(scored) {
        let pair_id = format!("{}\t{}", pair.head, pair.tail);
        for (k, &score) in scores.iter().enumerate().skip(1) {
            records.push(PredictionRecord {
                pair: pair_id.clone(),
                relation: k,
                score,
            });
        }
        for &g in &pair.gold {
            facts.insert(pair_id.clone(), g);
        }
    }
    Ok((records, facts))
}
