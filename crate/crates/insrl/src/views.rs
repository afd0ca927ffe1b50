//! The three single-view vectors: sentence bag, description pair, type pair.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ViewParams {
    /// Diagonal of the bilinear bag-attention form, stored as `[1, d]`.
    pub bag_diag: ParamId,
    /// `[d, 2d]` combiner over the concatenated description pair.
    pub desc_combine: ParamId,
    pub desc_bias: ParamId,
    /// `[d, 2d]` combiner over the concatenated type-set pair.
    pub type_combine: ParamId,
    pub type_bias: ParamId,
}

pub fn init_view_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    d_model: usize,
) -> ViewParams {
    let d = d_model;
    ViewParams {
        bag_diag: store.add("views.bag.diag", Tensor::filled(&[1, d], T::one())),
        desc_combine: store.add(
            "views.desc.combine",
            init::xavier(rng, &[d, 2 * d], 2 * d, d),
        ),
        desc_bias: store.add("views.desc.bias", Tensor::zeros(&[1, d])),
        type_combine: store.add(
            "views.type.combine",
            init::xavier(rng, &[d, 2 * d], 2 * d, d),
        ),
        type_bias: store.add("views.type.bias", Tensor::zeros(&[1, d])),
    }
}

/// Stack `[1, d]` rows into an `[m, d]` matrix.
pub fn stack_rows<T: Scalar>(tape: &mut Tape<T>, rows: &[BufId]) -> Result<BufId> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("stack_rows"));
    }
    let d = tape.shape(rows[0])[1];
    let wide = tape.concat_cols(rows)?;
    tape.reshape(wide, &[rows.len(), d])
}

/// Selective attention over a sentence bag: score each sentence vector
/// against the query relation through a diagonal bilinear form, softmax,
/// and combine. `query` is a `[1, d]` relation embedding row.
pub fn bag_attention<T: Scalar>(
    tape: &mut Tape<T>,
    sentence_vecs: &[BufId],
    query: BufId,
    bag_diag: ParamId,
) -> Result<BufId> {
    if sentence_vecs.is_empty() {
        return Err(Error::EmptyInput("bag_attention"));
    }
    let m = sentence_vecs.len();
    let diag = tape.param(bag_diag);
    let stack = stack_rows(tape, sentence_vecs)?;
    let weighted = tape.mul_row(stack, diag)?;
    let scores = tape.matmul_tb(weighted, query)?;
    let row = tape.reshape(scores, &[1, m])?;
    let beta = tape.row_softmax(row, m)?;
    tape.matmul(beta, stack)
}

/// `tanh(W₂ [d₁; d₂] + b₂)` over the head/tail description encodings.
pub fn description_view<T: Scalar>(
    tape: &mut Tape<T>,
    d1: BufId,
    d2: BufId,
    combine: ParamId,
    bias: ParamId,
) -> Result<BufId> {
    let w = tape.param(combine);
    let b = tape.param(bias);
    let cat = tape.concat_cols(&[d1, d2])?;
    tape.tanh_affine(w, cat, b)
}

/// `tanh(W₃ [c₁; c₂] + b₃)` over the head/tail type-set encodings.
pub fn type_view<T: Scalar>(
    tape: &mut Tape<T>,
    c1: BufId,
    c2: BufId,
    combine: ParamId,
    bias: ParamId,
) -> Result<BufId> {
    let w = tape.param(combine);
    let b = tape.param(bias);
    let cat = tape.concat_cols(&[c1, c2])?;
    tape.tanh_affine(w, cat, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(d: usize) -> (ParamStore<f64>, ViewParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let params = init_view_params(&mut store, &mut rng, d);
        (store, params)
    }

    fn row(tape: &mut Tape<f64>, vals: &[f64]) -> BufId {
        tape.constant(Tensor::row(vals.to_vec()))
    }

    #[test]
    fn single_sentence_bag_returns_it_unchanged() {
        let (store, params) = setup(3);
        let mut tape = Tape::new(&store);
        let s = row(&mut tape, &[0.3, -0.7, 1.1]);
        let q = row(&mut tape, &[5.0, -2.0, 0.1]);
        let v1 = bag_attention(&mut tape, &[s], q, params.bag_diag).unwrap();
        assert_eq!(tape.data(v1), tape.data(s));
    }

    #[test]
    fn equal_scores_average_the_bag() {
        let (mut store, params) = setup(2);
        // make scores equal regardless of content: zero the diagonal
        for v in store.value_mut(params.bag_diag).data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new(&store);
        let s1 = row(&mut tape, &[1.0, 3.0]);
        let s2 = row(&mut tape, &[5.0, -1.0]);
        let q = row(&mut tape, &[0.4, 0.2]);
        let v1 = bag_attention(&mut tape, &[s1, s2], q, params.bag_diag).unwrap();
        assert!((tape.data(v1)[0] - 3.0).abs() < 1e-15);
        assert!((tape.data(v1)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_bag_is_an_error() {
        let (store, params) = setup(2);
        let mut tape = Tape::new(&store);
        let q = row(&mut tape, &[1.0, 1.0]);
        assert!(bag_attention(&mut tape, &[], q, params.bag_diag).is_err());
    }

    #[test]
    fn two_sentence_bag_matches_hand_computation() {
        let (mut store, params) = setup(2);
        let diag = [0.5, 2.0];
        store
            .value_mut(params.bag_diag)
            .data_mut()
            .copy_from_slice(&diag);
        let s1 = [1.0, -1.0];
        let s2 = [0.5, 0.5];
        let q = [2.0, 1.0];
        // ω_i = Σ_d s_id · diag_d · q_d
        let w1 = s1[0] * diag[0] * q[0] + s1[1] * diag[1] * q[1];
        let w2 = s2[0] * diag[0] * q[0] + s2[1] * diag[1] * q[1];
        let z = w1.exp() + w2.exp();
        let (b1, b2) = (w1.exp() / z, w2.exp() / z);

        let mut tape = Tape::new(&store);
        let s1b = row(&mut tape, &s1);
        let s2b = row(&mut tape, &s2);
        let qb = row(&mut tape, &q);
        let v1 = bag_attention(&mut tape, &[s1b, s2b], qb, params.bag_diag).unwrap();
        for c in 0..2 {
            let want = b1 * s1[c] + b2 * s2[c];
            assert!((tape.data(v1)[c] - want).abs() < 1e-14);
        }
        // β is a probability vector and v1 stays in the hull of {s_i}
        let (sm, valid) = tape.softmax_outputs()[0];
        assert_eq!(valid, 2);
        let total: f64 = tape.data(sm).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bag_scores_are_shift_invariant() {
        // adding a constant to every score leaves β unchanged — softmax property
        let (store, params) = setup(2);
        let mut tape = Tape::new(&store);
        let raw = tape.constant(Tensor::row(vec![0.2, 1.3, -0.4]));
        let beta_a = tape.row_softmax(raw, 3).unwrap();
        let shifted = tape.scale(raw, 1.0).unwrap();
        let c = tape.constant(Tensor::from_vec(&[1, 1], vec![7.5]).unwrap());
        let shifted = tape.add_scalar(shifted, c).unwrap();
        let beta_b = tape.row_softmax(shifted, 3).unwrap();
        for (a, b) in tape.data(beta_a).iter().zip(tape.data(beta_b)) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = params;
    }

    #[test]
    fn description_view_zero_weights_zero_output() {
        let (mut store, params) = setup(3);
        for v in store.value_mut(params.desc_combine).data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new(&store);
        let d1 = row(&mut tape, &[1.0, 2.0, 3.0]);
        let d2 = row(&mut tape, &[-1.0, 0.5, 0.0]);
        let v2 = description_view(&mut tape, d1, d2, params.desc_combine, params.desc_bias)
            .unwrap();
        assert!(tape.data(v2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn description_view_is_order_sensitive() {
        let (store, params) = setup(3);
        let mut tape = Tape::new(&store);
        let d1 = row(&mut tape, &[1.0, 0.0, 0.0]);
        let d2 = row(&mut tape, &[0.0, 1.0, 0.0]);
        let a = description_view(&mut tape, d1, d2, params.desc_combine, params.desc_bias)
            .unwrap();
        let b = description_view(&mut tape, d2, d1, params.desc_combine, params.desc_bias)
            .unwrap();
        assert!(tape.data(a) != tape.data(b), "head/tail order must matter");
    }

    #[test]
    fn view_combiners_match_elementwise_oracle_and_stay_bounded() {
        let (store, params) = setup(2);
        let w = store.value(params.type_combine).clone();
        let mut tape = Tape::new(&store);
        let c1 = row(&mut tape, &[0.9, -1.4]);
        let c2 = row(&mut tape, &[2.2, 0.3]);
        let v3 = type_view(&mut tape, c1, c2, params.type_combine, params.type_bias).unwrap();
        let cat = [0.9, -1.4, 2.2, 0.3];
        for r in 0..2 {
            let pre: f64 = (0..4).map(|c| w.at(r, c) * cat[c]).sum();
            let want = pre.tanh();
            let got = tape.data(v3)[r];
            assert!((got - want).abs() < 1e-14);
            assert!(got > -1.0 && got < 1.0);
        }
    }
}
