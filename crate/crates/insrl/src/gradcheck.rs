//! Central-difference gradient oracle.
//!
//! Perturbs every entry of every parameter by ±eps, recomputes the loss, and
//! compares the numeric slope against the analytic gradient from the tape.
//! Always runs in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::data::{
    EncodedDescription, EncodedSentence, EncodedTypeSet, EntityPairSample, Vocab,
};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

/// Outcome of a full sweep over the parameter store.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / (|analytic| + |numeric| + 1e-12)
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Entries where analytic and numeric agree this closely in absolute terms
/// count as matching. Central differences carry noise of order
/// `machine_eps · |loss| / eps`, so gradients that are mathematically zero
/// (softmax shift-invariant offsets) would otherwise drown in it.
const ABS_AGREEMENT: f64 = 1e-8;

/// Check analytic gradients against central finite differences.
///
/// `loss` must be a pure function of the store (same bits in, same bits out).
/// `analytic` holds the gradients to verify, typically from one tape backward
/// at the unperturbed point. `eps` must lie in `[1e-7, 1e-3]`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    analytic: &Gradients<f64>,
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };

    for id in 0..store.len() {
        let numel = store.value(id).numel();
        let dense = analytic.dense(id);
        for idx in 0..numel {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + eps;
            let up = loss(store)?;
            store.value_mut(id).data_mut()[idx] = orig - eps;
            let down = loss(store)?;
            store.value_mut(id).data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite("grad_check perturbed loss".into()));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = dense[idx];
            let diff = (a - numeric).abs();
            let rel = if diff < ABS_AGREEMENT {
                0.0
            } else {
                diff / (a.abs() + numeric.abs() + 1e-12)
            };
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

// ── end-to-end model suite ────────────────────────────────────────────

/// Toy dimensions for the end-to-end gradient suite: large enough to
/// exercise every code path, small enough for thousands of forward passes.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_word: 6,
        d_position: 4,
        d_type: 4,
        d_intact: 12,
        heads: 2,
        conv_layers: 2,
        conv_width: 3,
        ..ModelConfig::default()
    }
}

/// Small vocabulary for the gradient suite and related toy experiments.
pub fn suite_vocab() -> Vocab {
    toy_vocab(12, 6, 4)
}

fn toy_vocab(n_words: usize, n_types: usize, n_relations: usize) -> Vocab {
    use crate::data::{RawBag, RawDataset, SentenceRecord};
    let ds = RawDataset {
        sentences: vec![SentenceRecord {
            head: "e1".into(),
            tail: "e2".into(),
            relation: "rel_0".into(),
            tokens: (0..n_words).map(|i| format!("tok{i:02}")).collect(),
            head_pos: 0,
            tail_pos: n_words - 1,
        }],
        descriptions: std::collections::HashMap::new(),
        types: std::collections::HashMap::from([(
            "e1".to_string(),
            (0..n_types).map(|i| format!("type{i}")).collect(),
        )]),
        relations: std::iter::once("NA".to_string())
            .chain((0..n_relations - 1).map(|i| format!("rel_{i}")))
            .collect(),
        bags: Vec::<RawBag>::new(),
    };
    crate::data::build_vocab(&ds, 1)
}

/// One random toy sample drawn from `rng` at the suite dimensions.
pub fn suite_sample(rng: &mut ChaCha8Rng, vocab: &Vocab, l: usize, l0: usize) -> EntityPairSample {
    random_toy_sample(rng, vocab, l, l0)
}

fn random_toy_sample(rng: &mut ChaCha8Rng, vocab: &Vocab, l: usize, l0: usize) -> EntityPairSample {
    let n_words = vocab.n_words();
    let n_types = vocab.n_types();
    let pos_vocab = 9; // clip 3
    fn sentence(
        rng: &mut ChaCha8Rng,
        l: usize,
        len: usize,
        n_words: usize,
        pos_vocab: usize,
    ) -> EncodedSentence {
        let mut tokens = vec![0usize; l];
        let mut pos_head = vec![0usize; l];
        let mut pos_tail = vec![0usize; l];
        for i in 0..len {
            tokens[i] = rng.gen_range(2..n_words);
            pos_head[i] = rng.gen_range(2..pos_vocab);
            pos_tail[i] = rng.gen_range(2..pos_vocab);
        }
        EncodedSentence {
            tokens,
            pos_head,
            pos_tail,
            len,
        }
    }
    fn description(
        rng: &mut ChaCha8Rng,
        l: usize,
        len: usize,
        n_words: usize,
        pos_vocab: usize,
    ) -> EncodedDescription {
        let mut tokens = vec![0usize; l];
        let mut pos = vec![0usize; l];
        for i in 0..len {
            tokens[i] = rng.gen_range(2..n_words);
            pos[i] = rng.gen_range(2..pos_vocab);
        }
        EncodedDescription { tokens, pos, len }
    }
    fn typeset(rng: &mut ChaCha8Rng, l0: usize, len: usize, n_types: usize) -> EncodedTypeSet {
        let mut types = vec![0usize; l0];
        for i in 0..len {
            types[i] = rng.gen_range(1..n_types);
        }
        EncodedTypeSet { types, len }
    }

    let len_a = rng.gen_range(2..=l);
    let len_b = rng.gen_range(1..=l);
    let bag = vec![
        sentence(rng, l, len_a, n_words, pos_vocab),
        sentence(rng, l, len_b, n_words, pos_vocab),
    ];
    let len_d1 = rng.gen_range(2..=l);
    let len_d2 = rng.gen_range(1..=l);
    let descriptions = (
        description(rng, l, len_d1, n_words, pos_vocab),
        description(rng, l, len_d2, n_words, pos_vocab),
    );
    let len_t1 = rng.gen_range(1..=l0);
    let len_t2 = rng.gen_range(1..=l0);
    let types = (
        typeset(rng, l0, len_t1, n_types),
        typeset(rng, l0, len_t2, n_types),
    );
    let relation = rng.gen_range(0..4);
    EntityPairSample {
        head: "e1".into(),
        tail: "e2".into(),
        bag,
        descriptions,
        types,
        relation,
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub per_seed: Vec<(u64, GradCheckReport)>,
    pub max_rel_err: f64,
}

/// Full end-to-end finite-difference suite at toy dimensions
/// (d_model 8, d_intact 12, l 6, l₀ 4, 4 relations, 2 heads): one random
/// model + sample per seed, every parameter entry checked. Seeds run in
/// parallel; results are reported in seed order.
pub fn model_gradient_suite(n_seeds: usize) -> Result<SuiteOutcome> {
    use crate::model::{build_text_model, sample_loss, Dataset, RSources};
    use crate::tape::Tape;

    let (l, l0) = (6usize, 4usize);
    let cfg = toy_model_config();
    let vocab = suite_vocab();

    let per_seed: Result<Vec<(u64, GradCheckReport)>> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = build_text_model::<f64>(&cfg, &vocab, 9, None, seed)?;
            let data = Dataset::Text(vec![random_toy_sample(&mut rng, &vocab, l, l0)]);
            let wiring = model.wiring.clone();

            let forward = |store: &ParamStore<f64>| -> Result<(f64, Gradients<f64>)> {
                let mut tape = Tape::with_finite_checks(store);
                let fwd = sample_loss(&mut tape, &wiring, &data, 0, 0.0, &RSources::live())?;
                let mut grads = Gradients::zeros_like(store);
                tape.backward(fwd.loss, &mut grads)?;
                Ok((tape.scalar(fwd.loss), grads))
            };
            let (_, grads) = forward(&model.store)?;
            // 1e-6 keeps the second-order truncation error of the central
            // difference below the pass threshold at high-curvature entries
            let report = grad_check(&mut model.store, &grads, 1e-6, |s| {
                forward(s).map(|r| r.0)
            })?;
            Ok((seed, report))
        })
        .collect();
    let per_seed = per_seed?;
    let max_rel_err = per_seed
        .iter()
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0, f64::max);
    Ok(SuiteOutcome {
        per_seed,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_slope_at_three() {
        // f(w) = w² at w = 3: analytic 6, numeric 6.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::row(vec![3.0]));

        let mut grads = Gradients::zeros_like(&store);
        {
            let mut tape = Tape::new(&store);
            let wb = tape.param(w);
            let loss = tape.sum_squares(wb).unwrap();
            tape.backward(loss, &mut grads).unwrap();
        }
        assert!((grads.get(w).unwrap()[0] - 6.0).abs() < 1e-12);

        let report = grad_check(&mut store, &grads, 1e-5, |s| {
            let mut tape = Tape::new(s);
            let wb = tape.param(0);
            let loss = tape.sum_squares(wb).unwrap();
            Ok(tape.scalar(loss))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_eps_outside_range() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::row(vec![1.0]));
        let grads = Gradients::zeros_like(&store);
        assert!(grad_check(&mut store, &grads, 1e-2, |_| Ok(0.0)).is_err());
        assert!(grad_check(&mut store, &grads, 1e-8, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn rejects_non_finite_loss() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::row(vec![1.0]));
        let grads = Gradients::zeros_like(&store);
        let r = grad_check(&mut store, &grads, 1e-5, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    /// Every differentiable op, composed into one scalar loss over random
    /// small shapes, must match central differences. Spans 20+ seeds.
    #[test]
    fn all_ops_pass_gradient_oracle_over_seeds() {
        use rand::{Rng, SeedableRng};
        for seed in 0..24u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l = rng.gen_range(2..5usize);
            let d = 2 * rng.gen_range(1..3usize); // even, ≥ 2
            let mut store = ParamStore::<f64>::new();
            let n_table = 5;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect())
                    .unwrap()
            };
            store.add("table", mk(&mut rng, &[n_table, d]));
            store.add("mat", mk(&mut rng, &[d, d]));
            store.add("kern", mk(&mut rng, &[3, d, d]));
            store.add("gain", mk(&mut rng, &[1, d]));
            store.add("bias", mk(&mut rng, &[1, d]));
            store.add("row", mk(&mut rng, &[1, d]));
            store.add("scalar", mk(&mut rng, &[1, 1]));
            let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..n_table)).collect();
            let valid = rng.gen_range(1..=l);
            let target = rng.gen_range(0..d);

            let forward = |s: &ParamStore<f64>| -> Result<(f64, Option<Gradients<f64>>, bool)> {
                let mut tape = Tape::with_finite_checks(s);
                let table = tape.param_named("table")?;
                let mat = tape.param_named("mat")?;
                let kern = tape.param_named("kern")?;
                let gain = tape.param_named("gain")?;
                let bias = tape.param_named("bias")?;
                let row = tape.param_named("row")?;
                let scl = tape.param_named("scalar")?;

                let e = tape.gather_rows(table, &ids)?;
                let ln = tape.layer_norm(e, gain, bias)?;
                let masked = tape.mask_rows(ln, valid)?;
                let conv = tape.conv1d_same(masked, kern)?;
                let act = tape.relu(conv)?;
                let res = tape.add(act, e)?;
                let proj = tape.matmul_tb(res, mat)?;
                let proj = tape.add_row(proj, row)?;
                let proj = tape.mul_row(proj, row)?;
                let th = tape.tanh(proj)?;
                let att = tape.matmul_tb(th, th)?; // [l, l]
                let sm = tape.row_softmax(att, valid)?;
                let mixed = tape.matmul(sm, res)?;
                let pooled = tape.mean_rows(mixed, valid)?;
                let pooled = tape.add_scalar(pooled, scl)?;
                let pooled = tape.scale_by(pooled, scl)?;
                let gram_raw = tape.matmul_ta(mat, mat)?; // [d, d] gram
                let gram = tape.add_diag(gram_raw, 0.5)?;
                let solved = tape.spd_solve(gram, pooled)?;
                let diff = tape.sub(solved, pooled)?;
                let sq = tape.sum_squares(diff)?;
                let logits = tape.matmul_tb(pooled, mat)?;
                let ce = tape.cross_entropy(logits, target)?;
                let both = tape.add(sq, ce)?;
                let loss = tape.scale(both, 0.5)?;

                let mut grads = Gradients::zeros_like(s);
                tape.backward(loss, &mut grads)?;
                Ok((tape.scalar(loss), Some(grads), true))
            };

            let (_, grads, _) = forward(&store).unwrap();
            let grads = grads.unwrap();
            let report = grad_check(&mut store, &grads, 1e-5, |s| forward(s).map(|r| r.0))
                .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: rel err {} at {}[{}]",
                report.max_rel_err,
                report.worst_param,
                report.worst_index
            );
        }
    }
}
