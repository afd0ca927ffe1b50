//! Cross-view attention and intact-space construction.
//!
//! Each view is modeled as a linear image of a latent vector; the latent is
//! recovered per sample by attention-weighted reconstruction, either through
//! the ridge-regularized closed form (a symmetric positive-definite solve) or
//! through the learnable combiner that replaces the inverse. The averaging
//! baselines live here too so every fusion strategy shares one surface.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Cross-view attention + intact construction.
    Insrl,
    /// Intact construction with uniform view weights.
    InsrlAvg,
    /// Plain average through one nonlinear layer.
    MvAvg,
    /// Attention-weighted average through one nonlinear layer.
    MvAtt,
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insrl" => Ok(FusionStrategy::Insrl),
            "insrl-avg" => Ok(FusionStrategy::InsrlAvg),
            "mv-avg" => Ok(FusionStrategy::MvAvg),
            "mv-att" => Ok(FusionStrategy::MvAtt),
            other => Err(Error::Config(format!(
                "unknown fusion strategy '{other}' (expected insrl | insrl-avg | mv-avg | mv-att)"
            ))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionStrategy::Insrl => "insrl",
            FusionStrategy::InsrlAvg => "insrl-avg",
            FusionStrategy::MvAvg => "mv-avg",
            FusionStrategy::MvAtt => "mv-att",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionForm {
    /// Learnable combiner in place of the matrix inverse (the default).
    Learnable,
    /// Ridge-regularized closed-form solve.
    Closed,
}

impl FromStr for FusionForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(FusionForm::Learnable),
            "closed" => Ok(FusionForm::Closed),
            other => Err(Error::Config(format!(
                "unknown fusion form '{other}' (expected learnable | closed)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// View generation matrices, `[d_model, d_intact]` each.
    pub view_gen: [ParamId; 3],
    /// Cross-view attention: projection, scoring vector, scalar offset.
    pub att_proj: ParamId,
    pub att_score: ParamId,
    pub att_offset: ParamId,
    /// Learnable combiner `[d_intact, d_intact]` replacing the inverse.
    pub combine: ParamId,
    /// Averaging baselines: `[d_intact, d_model]` projection and bias.
    pub avg_proj: ParamId,
    pub avg_bias: ParamId,
}

pub fn init_fusion_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    d_model: usize,
    d_intact: usize,
) -> FusionParams {
    let gen_std = 1.0 / (d_model as f64).sqrt();
    let view_gen = [
        store.add("fusion.gen1", init::gaussian(rng, &[d_model, d_intact], gen_std)),
        store.add("fusion.gen2", init::gaussian(rng, &[d_model, d_intact], gen_std)),
        store.add("fusion.gen3", init::gaussian(rng, &[d_model, d_intact], gen_std)),
    ];
    FusionParams {
        view_gen,
        att_proj: store.add(
            "fusion.att.proj",
            init::xavier(rng, &[d_model, d_model], d_model, d_model),
        ),
        att_score: store.add(
            "fusion.att.score",
            init::xavier(rng, &[d_model, 1], d_model, 1),
        ),
        att_offset: store.add("fusion.att.offset", Tensor::zeros(&[1, 1])),
        combine: store.add("fusion.combine", init::noisy_identity(rng, d_intact, 0.01)),
        avg_proj: store.add(
            "fusion.avg.proj",
            init::xavier(rng, &[d_intact, d_model], d_model, d_intact),
        ),
        avg_bias: store.add("fusion.avg.bias", Tensor::zeros(&[1, d_intact])),
    }
}

/// Attention weights over the present views: softmax of
/// `w₄ᵀ tanh(W₄ vⱼ + r̂) + b₄`. Output `[1, p]` on the simplex.
pub fn view_attention<T: Scalar>(
    tape: &mut Tape<T>,
    views: &[BufId],
    params: &FusionParams,
    r_hat: BufId,
) -> Result<BufId> {
    if views.is_empty() {
        return Err(Error::EmptyInput("view_attention"));
    }
    let proj = tape.param(params.att_proj);
    let score = tape.param(params.att_score);
    let offset = tape.param(params.att_offset);
    let mut scores = Vec::with_capacity(views.len());
    for &v in views {
        let t = tape.matmul_tb(v, proj)?;
        let t = tape.add(t, r_hat)?;
        let t = tape.tanh(t)?;
        let s = tape.matmul(t, score)?;
        scores.push(tape.add_scalar(s, offset)?);
    }
    let row = tape.concat_cols(&scores)?;
    tape.row_softmax(row, views.len())
}

/// Uniform weights `1/p` as a constant buffer, for the attention-free variant.
pub fn uniform_gammas<T: Scalar>(tape: &mut Tape<T>, p: usize) -> BufId {
    tape.constant(Tensor::filled(&[1, p], T::from_f64(1.0 / p as f64)))
}

/// γ-weighted back-projection `Σⱼ γⱼ Ŵⱼᵀ vⱼ`, the shared input of both
/// intact constructions. `gen` holds the per-view generation matrices of the
/// present views, aligned with `views`.
fn weighted_backprojection<T: Scalar>(
    tape: &mut Tape<T>,
    views: &[BufId],
    gammas: BufId,
    gen: &[ParamId],
) -> Result<BufId> {
    debug_assert_eq!(views.len(), gen.len());
    let mut sum: Option<BufId> = None;
    for (j, (&v, &g)) in views.iter().zip(gen).enumerate() {
        let gen_buf = tape.param(g);
        let back = tape.matmul(v, gen_buf)?; // [1, d_model]·[d_model, d_intact]
        let gamma_j = tape.slice_cols(gammas, j, 1)?;
        let term = tape.scale_by(back, gamma_j)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(sum.expect("at least one view"))
}

/// Closed-form intact vector: solve `(Σⱼ γⱼ ŴⱼᵀŴⱼ + εI) x = Σⱼ γⱼ Ŵⱼᵀ vⱼ`.
/// The Gram matrix is rank-deficient whenever `d_intact` exceeds the stacked
/// view dimensionality, so the ridge `ε > 0` is required.
pub fn intact_closed_form<T: Scalar>(
    tape: &mut Tape<T>,
    views: &[BufId],
    gammas: BufId,
    gen: &[ParamId],
    ridge: f64,
) -> Result<BufId> {
    if views.is_empty() {
        return Err(Error::EmptyInput("intact_closed_form"));
    }
    if ridge <= 0.0 {
        return Err(Error::Config(format!(
            "closed-form fusion requires ridge > 0, got {ridge}"
        )));
    }
    let mut gram_sum: Option<BufId> = None;
    for (j, &g) in gen.iter().enumerate() {
        let gen_buf = tape.param(g);
        let gram = tape.matmul_ta(gen_buf, gen_buf)?; // [d_intact, d_intact]
        let gamma_j = tape.slice_cols(gammas, j, 1)?;
        let term = tape.scale_by(gram, gamma_j)?;
        gram_sum = Some(match gram_sum {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let system = tape.add_diag(gram_sum.expect("at least one view"), ridge)?;
    let rhs = weighted_backprojection(tape, views, gammas, gen)?;
    tape.spd_solve(system, rhs)
}

/// Learnable intact vector: `x = W Σⱼ γⱼ Ŵⱼᵀ vⱼ`.
pub fn intact_learnable<T: Scalar>(
    tape: &mut Tape<T>,
    views: &[BufId],
    gammas: BufId,
    gen: &[ParamId],
    combine: ParamId,
) -> Result<BufId> {
    if views.is_empty() {
        return Err(Error::EmptyInput("intact_learnable"));
    }
    let s = weighted_backprojection(tape, views, gammas, gen)?;
    let w = tape.param(combine);
    tape.matmul_tb(s, w)
}

/// Weighted reconstruction error `Σⱼ γⱼ ‖vⱼ − Ŵⱼ x‖²` of one sample.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    views: &[BufId],
    x: BufId,
    gammas: BufId,
    gen: &[ParamId],
) -> Result<BufId> {
    let mut total: Option<BufId> = None;
    for (j, (&v, &g)) in views.iter().zip(gen).enumerate() {
        let gen_buf = tape.param(g);
        let recon = tape.matmul_tb(x, gen_buf)?; // [1, d_model]
        let diff = tape.sub(v, recon)?;
        let sq = tape.sum_squares(diff)?;
        let gamma_j = tape.slice_cols(gammas, j, 1)?;
        let term = tape.scale_by(sq, gamma_j)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyInput("reconstruction_loss"))
}

/// Fused intact vector for any strategy, over the present views only
/// (`present` holds original view indices, `views` the matching vectors).
/// Returns the intact vector and the attention weights when the strategy
/// computes them.
#[allow(clippy::too_many_arguments)]
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    strategy: FusionStrategy,
    form: FusionForm,
    views: &[BufId],
    present: &[usize],
    params: &FusionParams,
    r_hat: BufId,
    ridge: f64,
) -> Result<(BufId, Option<BufId>)> {
    if views.is_empty() || views.len() != present.len() {
        return Err(Error::EmptyInput("fuse"));
    }
    let gen: Vec<ParamId> = present.iter().map(|&j| params.view_gen[j]).collect();
    let p = views.len();

    let intact = |tape: &mut Tape<T>, gammas: BufId| -> Result<BufId> {
        match form {
            FusionForm::Learnable => intact_learnable(tape, views, gammas, &gen, params.combine),
            FusionForm::Closed => intact_closed_form(tape, views, gammas, &gen, ridge),
        }
    };

    match strategy {
        FusionStrategy::MvAvg => {
            let mut sum = views[0];
            for &v in &views[1..] {
                sum = tape.add(sum, v)?;
            }
            let mean = tape.scale(sum, 1.0 / p as f64)?;
            let proj = tape.param(params.avg_proj);
            let bias = tape.param(params.avg_bias);
            let x = tape.tanh_affine(proj, mean, bias)?;
            Ok((x, None))
        }
        FusionStrategy::MvAtt => {
            let gammas = view_attention(tape, views, params, r_hat)?;
            let mut sum: Option<BufId> = None;
            for (j, &v) in views.iter().enumerate() {
                let gamma_j = tape.slice_cols(gammas, j, 1)?;
                let term = tape.scale_by(v, gamma_j)?;
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            let weighted = sum.expect("views checked non-empty");
            let proj = tape.param(params.avg_proj);
            let bias = tape.param(params.avg_bias);
            let x = tape.tanh_affine(proj, weighted, bias)?;
            Ok((x, Some(gammas)))
        }
        FusionStrategy::InsrlAvg => {
            let gammas = uniform_gammas(tape, p);
            let x = intact(tape, gammas)?;
            Ok((x, None))
        }
        FusionStrategy::Insrl => {
            let gammas = view_attention(tape, views, params, r_hat)?;
            let x = intact(tape, gammas)?;
            Ok((x, Some(gammas)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(d_model: usize, d_intact: usize, seed: u64) -> (ParamStore<f64>, FusionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = init_fusion_params(&mut store, &mut rng, d_model, d_intact);
        (store, params)
    }

    fn rows(tape: &mut Tape<f64>, data: &[&[f64]]) -> Vec<BufId> {
        data.iter()
            .map(|r| tape.constant(Tensor::row(r.to_vec())))
            .collect()
    }

    #[test]
    fn identical_views_get_uniform_attention() {
        let (store, params) = setup(4, 6, 1);
        let mut tape = Tape::new(&store);
        let v = [0.3, -0.5, 0.8, 0.0];
        let views = rows(&mut tape, &[&v, &v, &v]);
        let r_hat = tape.constant(Tensor::row(vec![0.1, 0.2, -0.1, 0.0]));
        let g = view_attention(&mut tape, &views, &params, r_hat).unwrap();
        for &x in tape.data(g) {
            assert!((x - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_offset_never_changes_gammas() {
        // b₄ shifts every score equally; softmax is shift-invariant.
        let (mut store, params) = setup(3, 5, 2);
        let compute = |store: &ParamStore<f64>| {
            let mut tape = Tape::new(store);
            let views = rows(
                &mut tape,
                &[&[0.5, 0.1, -0.2], &[-0.7, 0.9, 0.3], &[0.0, 0.2, 0.4]],
            );
            let r_hat = tape.constant(Tensor::row(vec![0.0, 0.1, 0.2]));
            let g = view_attention(&mut tape, &views, &params, r_hat).unwrap();
            tape.value(g)
        };
        let before = compute(&store);
        store.value_mut(params.att_offset).data_mut()[0] = 42.0;
        let after = compute(&store);
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn view_attention_matches_hand_formula() {
        let (mut store, params) = setup(2, 4, 3);
        let proj = [[0.3, -0.2], [0.1, 0.4]];
        let score = [0.7, -0.5];
        for (r, row) in proj.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                store.value_mut(params.att_proj).set(r, c, v);
            }
        }
        for (r, &v) in score.iter().enumerate() {
            store.value_mut(params.att_score).set(r, 0, v);
        }
        store.value_mut(params.att_offset).data_mut()[0] = 0.2;
        let views_data: [[f64; 2]; 3] = [[0.5, -0.1], [0.9, 0.4], [-0.3, 0.6]];
        let r_hat_data = [0.05, -0.15];

        let mut tape = Tape::new(&store);
        let views = rows(
            &mut tape,
            &[&views_data[0], &views_data[1], &views_data[2]],
        );
        let r_hat = tape.constant(Tensor::row(r_hat_data.to_vec()));
        let g = view_attention(&mut tape, &views, &params, r_hat).unwrap();

        let mut raw = [0.0f64; 3];
        for (j, v) in views_data.iter().enumerate() {
            let mut t = [0.0f64; 2];
            for r in 0..2 {
                t[r] = (proj[r][0] * v[0] + proj[r][1] * v[1] + r_hat_data[r]).tanh();
            }
            raw[j] = score[0] * t[0] + score[1] * t[1] + 0.2;
        }
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = raw.iter().map(|x| (x - max).exp()).sum();
        for j in 0..3 {
            let want = (raw[j] - max).exp() / z;
            assert!((tape.data(g)[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_identity_maps_blend_views() {
        // Ŵ_j = I (d_intact = d_model): x ≈ Σ γ_j v_j as ridge → 0.
        let (mut store, params) = setup(3, 3, 4);
        for &g in &params.view_gen {
            let t = store.value_mut(g);
            for r in 0..3 {
                for c in 0..3 {
                    t.set(r, c, if r == c { 1.0 } else { 0.0 });
                }
            }
        }
        let mut tape = Tape::new(&store);
        let views = rows(
            &mut tape,
            &[&[1.0, 0.0, 2.0], &[0.0, -1.0, 1.0], &[3.0, 1.0, 0.0]],
        );
        let gammas = tape.constant(Tensor::row(vec![0.5, 0.3, 0.2]));
        let gen = params.view_gen.to_vec();
        let x = intact_closed_form(&mut tape, &views, gammas, &gen, 1e-10).unwrap();
        let want = [
            0.5 * 1.0 + 0.3 * 0.0 + 0.2 * 3.0,
            0.5 * 0.0 - 0.3 + 0.2,
            0.5 * 2.0 + 0.3 + 0.0,
        ];
        for c in 0..3 {
            assert!((tape.data(x)[c] - want[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_recovers_latent_in_noiseless_case() {
        // v_j = Ŵ_j x*: stacked maps have full column rank, so x ≈ x*.
        let (store, params) = setup(4, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x_star: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new(&store);
        let xs = tape.constant(Tensor::row(x_star.clone()));
        let gen = params.view_gen.to_vec();
        let views: Vec<BufId> = gen
            .iter()
            .map(|&g| {
                let gb = tape.param(g);
                tape.matmul_tb(xs, gb).unwrap()
            })
            .collect();
        let gammas = tape.constant(Tensor::row(vec![0.2, 0.5, 0.3]));
        let x = intact_closed_form(&mut tape, &views, gammas, &gen, 1e-10).unwrap();
        for c in 0..6 {
            assert!(
                (tape.data(x)[c] - x_star[c]).abs() < 1e-6,
                "coordinate {c}: {} vs {}",
                tape.data(x)[c],
                x_star[c]
            );
        }
    }

    /// Conjugate-gradient minimizer of the weighted reconstruction objective
    /// plus ridge, written directly from its gradient. Independent of the
    /// Cholesky path inside the tape.
    pub(crate) fn cg_minimize(
        views: &[Vec<f64>],
        gammas: &[f64],
        gen: &[Vec<f64>], // each [d_model × d_intact], row-major
        d_model: usize,
        d_intact: usize,
        ridge: f64,
    ) -> Vec<f64> {
        // Hessian-vector product: H p = 2 (Σ γ_j Ŵ_jᵀ Ŵ_j p + ridge p)
        let hvp = |p: &[f64]| -> Vec<f64> {
            let mut out: Vec<f64> = p.iter().map(|v| 2.0 * ridge * v).collect();
            for (j, w) in gen.iter().enumerate() {
                let mut wp = vec![0.0; d_model];
                for r in 0..d_model {
                    for c in 0..d_intact {
                        wp[r] += w[r * d_intact + c] * p[c];
                    }
                }
                for c in 0..d_intact {
                    let mut acc = 0.0;
                    for r in 0..d_model {
                        acc += w[r * d_intact + c] * wp[r];
                    }
                    out[c] += 2.0 * gammas[j] * acc;
                }
            }
            out
        };
        // gradient at x = 0 is −2 Σ γ_j Ŵ_jᵀ v_j
        let mut b = vec![0.0; d_intact];
        for (j, w) in gen.iter().enumerate() {
            for c in 0..d_intact {
                let mut acc = 0.0;
                for r in 0..d_model {
                    acc += w[r * d_intact + c] * views[j][r];
                }
                b[c] += 2.0 * gammas[j] * acc;
            }
        }
        // CG on H x = b
        let mut x = vec![0.0; d_intact];
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rs: f64 = r.iter().map(|v| v * v).sum();
        for _ in 0..10 * d_intact {
            if rs.sqrt() < 1e-14 {
                break;
            }
            let hp = hvp(&p);
            let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
            let alpha = rs / php;
            for i in 0..d_intact {
                x[i] += alpha * p[i];
                r[i] -= alpha * hp[i];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..d_intact {
                p[i] = r[i] + beta * p[i];
            }
        }
        x
    }

    #[test]
    fn closed_form_agrees_with_iterative_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..10 {
            let d_model = rng.gen_range(2..=4usize);
            let d_intact = rng.gen_range(2..=6usize);
            let (store, params) = setup(d_model, d_intact, 50 + case);
            let views_data: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..d_model).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let g_raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
            let g_sum: f64 = g_raw.iter().sum();
            let gammas_data: Vec<f64> = g_raw.iter().map(|g| g / g_sum).collect();
            let ridge = 1e-3;

            let mut tape = Tape::new(&store);
            let views: Vec<BufId> = views_data
                .iter()
                .map(|v| tape.constant(Tensor::row(v.clone())))
                .collect();
            let gammas = tape.constant(Tensor::row(gammas_data.clone()));
            let gen = params.view_gen.to_vec();
            let x = intact_closed_form(&mut tape, &views, gammas, &gen, ridge).unwrap();

            let gen_data: Vec<Vec<f64>> = gen
                .iter()
                .map(|&g| store.value(g).data().to_vec())
                .collect();
            let oracle = cg_minimize(&views_data, &gammas_data, &gen_data, d_model, d_intact, ridge);
            for c in 0..d_intact {
                assert!(
                    (tape.data(x)[c] - oracle[c]).abs() < 1e-6,
                    "case {case} coord {c}: {} vs {}",
                    tape.data(x)[c],
                    oracle[c]
                );
            }
        }
    }

    #[test]
    fn closed_form_satisfies_stationarity() {
        // Residual of the ridge normal equations must vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (store, params) = setup(4, 6, 6);
        let views_data: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gammas_data = [0.25, 0.35, 0.4];
        let ridge = 1e-3;
        let mut tape = Tape::new(&store);
        let views: Vec<BufId> = views_data
            .iter()
            .map(|v| tape.constant(Tensor::row(v.clone())))
            .collect();
        let gammas = tape.constant(Tensor::row(gammas_data.to_vec()));
        let gen = params.view_gen.to_vec();
        let x = intact_closed_form(&mut tape, &views, gammas, &gen, ridge).unwrap();
        let xv = tape.data(x);

        // residual = Σ γ_j Ŵ_jᵀ (v_j − Ŵ_j x) − ridge·x
        let mut resid = vec![0.0; 6];
        for c in 0..6 {
            resid[c] = -ridge * xv[c];
        }
        for (j, &g) in gen.iter().enumerate() {
            let w = store.value(g);
            let mut wx = vec![0.0; 4];
            for r in 0..4 {
                for c in 0..6 {
                    wx[r] += w.at(r, c) * xv[c];
                }
            }
            for c in 0..6 {
                let mut acc = 0.0;
                for r in 0..4 {
                    acc += w.at(r, c) * (views_data[j][r] - wx[r]);
                }
                resid[c] += gammas_data[j] * acc;
            }
        }
        let norm: f64 = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "stationarity residual {norm}");
    }

    #[test]
    fn closed_form_rejects_nonpositive_ridge() {
        let (store, params) = setup(2, 3, 8);
        let mut tape = Tape::new(&store);
        let views = rows(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let gammas = uniform_gammas(&mut tape, 3);
        let gen = params.view_gen.to_vec();
        assert!(intact_closed_form(&mut tape, &views, gammas, &gen, 0.0).is_err());
    }

    #[test]
    fn learnable_zero_combiner_gives_zero() {
        let (mut store, params) = setup(3, 4, 9);
        for v in store.value_mut(params.combine).data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new(&store);
        let views = rows(&mut tape, &[&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3], &[-1.0, 0.0, 1.0]]);
        let gammas = uniform_gammas(&mut tape, 3);
        let gen = params.view_gen.to_vec();
        let x = intact_learnable(&mut tape, &views, gammas, &gen, params.combine).unwrap();
        assert!(tape.data(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn learnable_one_hot_gate_uses_single_view() {
        let (store, params) = setup(3, 4, 10);
        let mut tape = Tape::new(&store);
        let views = rows(&mut tape, &[&[0.5, -0.5, 1.0], &[9.0, 9.0, 9.0], &[-9.0, 0.0, 9.0]]);
        let gammas = tape.constant(Tensor::row(vec![1.0, 0.0, 0.0]));
        let gen = params.view_gen.to_vec();
        let x = intact_learnable(&mut tape, &views, gammas, &gen, params.combine).unwrap();
        // oracle: W (Ŵ₁ᵀ v₁)
        let w1 = store.value(params.view_gen[0]);
        let wc = store.value(params.combine);
        let mut back = vec![0.0; 4];
        for c in 0..4 {
            for r in 0..3 {
                back[c] += w1.at(r, c) * [0.5, -0.5, 1.0][r];
            }
        }
        for r in 0..4 {
            let want: f64 = (0..4).map(|c| wc.at(r, c) * back[c]).sum();
            assert!((tape.data(x)[r] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn learnable_is_linear_in_each_view() {
        let (store, params) = setup(3, 5, 11);
        let gen = params.view_gen.to_vec();
        let base = [[0.3, 0.4, -0.2], [1.0, 0.0, 0.5], [0.0, -1.0, 0.25]];
        let delta = [0.17, -0.4, 0.08];
        let gammas_data = [0.2, 0.5, 0.3];
        let run = |views_data: &[[f64; 3]; 3]| -> Vec<f64> {
            let mut tape = Tape::new(&store);
            let views = rows(&mut tape, &[&views_data[0], &views_data[1], &views_data[2]]);
            let gammas = tape.constant(Tensor::row(gammas_data.to_vec()));
            let x = intact_learnable(&mut tape, &views, gammas, &gen, params.combine).unwrap();
            tape.data(x).to_vec()
        };
        let x0 = run(&base);
        let mut bumped = base;
        for c in 0..3 {
            bumped[1][c] += delta[c];
        }
        let x1 = run(&bumped);
        // expected change: γ₂ · W Ŵ₂ᵀ δ
        let w2 = store.value(params.view_gen[1]);
        let wc = store.value(params.combine);
        let mut back = vec![0.0; 5];
        for c in 0..5 {
            for r in 0..3 {
                back[c] += w2.at(r, c) * delta[r];
            }
        }
        for r in 0..5 {
            let want: f64 = gammas_data[1] * (0..5).map(|c| wc.at(r, c) * back[c]).sum::<f64>();
            assert!((x1[r] - x0[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_loss_cases() {
        let (mut store, params) = setup(3, 3, 12);
        // Ŵ₁ = I for the hand case
        for (i, &g) in params.view_gen.iter().enumerate() {
            let t = store.value_mut(g);
            for r in 0..3 {
                for c in 0..3 {
                    t.set(r, c, if i == 0 && r == c { 1.0 } else if i == 0 { 0.0 } else { t.at(r, c) });
                }
            }
        }
        let gen = params.view_gen.to_vec();

        // exact generation → zero loss
        {
            let mut tape = Tape::new(&store);
            let xs = tape.constant(Tensor::row(vec![0.4, -0.2, 0.9]));
            let views: Vec<BufId> = gen
                .iter()
                .map(|&g| {
                    let gb = tape.param(g);
                    tape.matmul_tb(xs, gb).unwrap()
                })
                .collect();
            let gammas = uniform_gammas(&mut tape, 3);
            let loss = reconstruction_loss(&mut tape, &views, xs, gammas, &gen).unwrap();
            assert!(tape.scalar(loss).abs() < 1e-24);
        }

        // γ = (1,0,0), Ŵ₁ = I, x = 0 → ‖v₁‖²
        {
            let mut tape = Tape::new(&store);
            let views = rows(&mut tape, &[&[3.0, 4.0, 0.0], &[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]]);
            let x = tape.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
            let gammas = tape.constant(Tensor::row(vec![1.0, 0.0, 0.0]));
            let loss = reconstruction_loss(&mut tape, &views, x, gammas, &gen).unwrap();
            assert!((tape.scalar(loss) - 25.0).abs() < 1e-12);
        }

        // random instance vs scalar loop oracle
        {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let views_data: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let x_data: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g_data = [0.3, 0.3, 0.4];
            let mut want = 0.0;
            for j in 0..3 {
                let w = store.value(gen[j]);
                for r in 0..3 {
                    let mut recon = 0.0;
                    for c in 0..3 {
                        recon += w.at(r, c) * x_data[c];
                    }
                    let d = views_data[j][r] - recon;
                    want += g_data[j] * d * d;
                }
            }
            let mut tape = Tape::new(&store);
            let views: Vec<BufId> = views_data
                .iter()
                .map(|v| tape.constant(Tensor::row(v.clone())))
                .collect();
            let x = tape.constant(Tensor::row(x_data));
            let gammas = tape.constant(Tensor::row(g_data.to_vec()));
            let loss = reconstruction_loss(&mut tape, &views, x, gammas, &gen).unwrap();
            assert!((tape.scalar(loss) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_strategies_agree_on_identical_views() {
        let (store, params) = setup(3, 5, 13);
        let v = [0.4, -0.6, 0.2];
        let run = |strategy: FusionStrategy| -> Vec<f64> {
            let mut tape = Tape::new(&store);
            let views = rows(&mut tape, &[&v, &v, &v]);
            let r_hat = tape.constant(Tensor::row(vec![0.1, 0.0, -0.1]));
            let (x, _) = fuse(
                &mut tape,
                strategy,
                FusionForm::Learnable,
                &views,
                &[0, 1, 2],
                &params,
                r_hat,
                1e-3,
            )
            .unwrap();
            tape.data(x).to_vec()
        };

        // MV-AVG with identical views = tanh(W₆ v + b₆)
        let avg = run(FusionStrategy::MvAvg);
        let w6 = store.value(params.avg_proj);
        for r in 0..5 {
            let want: f64 = (0..3).map(|c| w6.at(r, c) * v[c]).sum::<f64>().tanh();
            assert!((avg[r] - want).abs() < 1e-12);
        }

        // MV-ATT reduces to MV-AVG when views are identical
        let att = run(FusionStrategy::MvAtt);
        for r in 0..5 {
            assert!((att[r] - avg[r]).abs() < 1e-12);
        }

        // InSRL reduces to InSRL-AVG when attention is forced uniform
        let insrl = run(FusionStrategy::Insrl);
        let insrl_avg = run(FusionStrategy::InsrlAvg);
        for r in 0..5 {
            assert!((insrl[r] - insrl_avg[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_strategy_name_is_rejected() {
        assert!("insrl".parse::<FusionStrategy>().is_ok());
        assert!("mv-max".parse::<FusionStrategy>().is_err());
        assert!("closed".parse::<FusionForm>().is_ok());
        assert!("inverse".parse::<FusionForm>().is_err());
    }

    #[test]
    fn gradients_flow_through_both_intact_forms() {
        use crate::gradcheck::grad_check;
        use crate::params::Gradients;
        for form in [FusionForm::Learnable, FusionForm::Closed] {
            let (mut store, params) = setup(3, 5, 14);
            let views_id = store.add(
                "test.views",
                Tensor::from_vec(
                    &[3, 3],
                    vec![0.5, -0.2, 0.8, 0.1, 0.9, -0.4, -0.6, 0.3, 0.2],
                )
                .unwrap(),
            );
            let r_hat_id = store.add("test.r_hat", Tensor::row(vec![0.1, -0.1, 0.2]));

            let forward = |store: &ParamStore<f64>| -> Result<(f64, Gradients<f64>)> {
                let mut tape = Tape::with_finite_checks(store);
                let all = tape.param(views_id);
                let wide = tape.reshape(all, &[1, 9])?;
                let views = vec![
                    tape.slice_cols(wide, 0, 3)?,
                    tape.slice_cols(wide, 3, 3)?,
                    tape.slice_cols(wide, 6, 3)?,
                ];
                let r_hat = tape.param(r_hat_id);
                let (x, _) = fuse(
                    &mut tape,
                    FusionStrategy::Insrl,
                    form,
                    &views,
                    &[0, 1, 2],
                    &params,
                    r_hat,
                    1e-2,
                )?;
                let loss = tape.sum_squares(x)?;
                let mut grads = Gradients::zeros_like(store);
                tape.backward(loss, &mut grads)?;
                Ok((tape.scalar(loss), grads))
            };

            let (_, grads) = forward(&store).unwrap();
            let report =
                grad_check(&mut store, &grads, 1e-5, |s| forward(s).map(|r| r.0)).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{form:?}: rel err {} at {}",
                report.max_rel_err,
                report.worst_param
            );
        }
    }
}
