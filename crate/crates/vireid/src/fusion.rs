//! Attention fusion of the two text-feature banks into integrated semantics.
//!
//! One bank acts as Query (and residual base), the other as Key and Value:
//!
//! ```text
//! A    = row_softmax( (Q·W_qᵀ)(K·W_kᵀ)ᵀ / √d )        (n, n)
//! out  = Q + (A · (V·W_vᵀ)) · W_cᵀ
//! ```
//!
//! Fusion runs over the full identity bank (n = N_c rows) in one pass, so
//! attention mixes information across identities. `W_c` is zero-initialized:
//! fusion starts as the identity map on the query bank.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which bank is Query/residual. `VisibleQuery` is the written form of the
/// fusion equations; `InfraredQuery` is the mirrored ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionDirection {
    VisibleQuery,
    InfraredQuery,
}

/// The four square projection maps of the fusion block.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_query: ArrayD<f64>,   // (d, d)
    pub w_key: ArrayD<f64>,     // (d, d)
    pub w_value: ArrayD<f64>,   // (d, d)
    pub w_combine: ArrayD<f64>, // (d, d)
}

impl FusionParams {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let std = (1.0 / dim as f64).sqrt();
        let mut draw = || {
            ArrayD::from_shape_fn(IxDyn(&[dim, dim]), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
        };
        let w_query = draw();
        let w_key = draw();
        let w_value = draw();
        FusionParams {
            w_query,
            w_key,
            w_value,
            w_combine: ArrayD::zeros(IxDyn(&[dim, dim])),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_query.shape()[0]
    }
}

pub struct FusionVars<'t> {
    pub w_query: Var<'t>,
    pub w_key: Var<'t>,
    pub w_value: Var<'t>,
    pub w_combine: Var<'t>,
}

impl FusionParams {
    pub fn mount<'t>(&self, tape: &'t Tape, trainable: bool) -> FusionVars<'t> {
        FusionVars {
            w_query: tape.leaf(self.w_query.clone(), trainable),
            w_key: tape.leaf(self.w_key.clone(), trainable),
            w_value: tape.leaf(self.w_value.clone(), trainable),
            w_combine: tape.leaf(self.w_combine.clone(), trainable),
        }
    }
}

fn check_banks(q: &Var<'_>, kv: &Var<'_>, dim: usize) -> Result<()> {
    let qs = q.value();
    let ks = kv.value();
    if qs.ndim() != 2 || ks.ndim() != 2 {
        return Err(Error::Input("fusion expects rank-2 feature banks".into()));
    }
    if qs.shape() != ks.shape() {
        return Err(Error::Input(format!(
            "fusion bank shapes differ: {:?} vs {:?}",
            qs.shape(),
            ks.shape()
        )));
    }
    if qs.shape()[0] == 0 {
        return Err(Error::Input("fusion needs at least one row".into()));
    }
    if qs.shape()[1] != dim {
        return Err(Error::Input(format!(
            "fusion params are {dim}-dim but banks have {} columns",
            qs.shape()[1]
        )));
    }
    Ok(())
}

/// Fused features plus the attention matrix (for inspection).
pub fn attention_fuse_with_weights<'t>(
    vars: &FusionVars<'t>,
    query: Var<'t>,
    key_value: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let dim = vars.w_query.value().shape()[0];
    check_banks(&query, &key_value, dim)?;
    let q = query.matmul(vars.w_query.t());
    let k = key_value.matmul(vars.w_key.t());
    let v = key_value.matmul(vars.w_value.t());
    let attn = q.matmul(k.t()).scale(1.0 / (dim as f64).sqrt()).softmax_rows();
    let fused = query.add(attn.matmul(v).matmul(vars.w_combine.t()));
    Ok((fused, attn))
}

/// `query + W_c(A · W_v(key_value))` with `A` row-softmaxed (see module docs).
pub fn attention_fuse<'t>(
    vars: &FusionVars<'t>,
    query: Var<'t>,
    key_value: Var<'t>,
) -> Result<Var<'t>> {
    attention_fuse_with_weights(vars, query, key_value).map(|(f, _)| f)
}

/// Apply the configured direction to the (visible, infrared) bank pair.
pub fn fuse_banks<'t>(
    vars: &FusionVars<'t>,
    direction: FusionDirection,
    f_tv: Var<'t>,
    f_tr: Var<'t>,
) -> Result<Var<'t>> {
    match direction {
        FusionDirection::VisibleQuery => attention_fuse(vars, f_tv, f_tr),
        FusionDirection::InfraredQuery => attention_fuse(vars, f_tr, f_tv),
    }
}

/// Eval-only fusion on plain arrays.
pub fn attention_fuse_eval(
    params: &FusionParams,
    f_tv: &Array2<f64>,
    f_tr: &Array2<f64>,
    direction: FusionDirection,
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let vars = params.mount(&tape, false);
    let tv = tape.constant(f_tv.clone().into_dyn());
    let tr = tape.constant(f_tr.clone().into_dyn());
    let fused = fuse_banks(&vars, direction, tv, tr)?;
    Ok(fused.value().into_dimensionality().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand_chacha::rand_core::SeedableRng;

    fn random_bank(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        use rand::Rng;
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_combine_returns_query_bank_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = FusionParams::init(&mut rng, 4); // w_combine starts at zero
        let f_tv = random_bank(&mut rng, 5, 4);
        let f_tr = random_bank(&mut rng, 5, 4);
        let fused =
            attention_fuse_eval(&params, &f_tv, &f_tr, FusionDirection::VisibleQuery).unwrap();
        assert_eq!(fused, f_tv);
    }

    #[test]
    fn single_row_identity_maps() {
        let ident = Array2::<f64>::eye(2).into_dyn();
        let params = FusionParams {
            w_query: ident.clone(),
            w_key: ident.clone(),
            w_value: ident.clone(),
            w_combine: ident,
        };
        let f_tv = arr2(&[[1.0, 0.0]]);
        let f_tr = arr2(&[[0.0, 1.0]]);
        let tape = Tape::new();
        let vars = params.mount(&tape, false);
        let (fused, attn) = attention_fuse_with_weights(
            &vars,
            tape.constant(f_tv.into_dyn()),
            tape.constant(f_tr.into_dyn()),
        )
        .unwrap();
        assert_eq!(attn.value(), arr2(&[[1.0]]).into_dyn());
        assert_eq!(fused.value(), arr2(&[[1.0, 1.0]]).into_dyn());
    }

    #[test]
    fn matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = FusionParams::init(&mut rng, 4);
        params.w_combine = random_bank(&mut rng, 4, 4).into_dyn();
        let f_tv = random_bank(&mut rng, 3, 4);
        let f_tr = random_bank(&mut rng, 3, 4);
        let fused =
            attention_fuse_eval(&params, &f_tv, &f_tr, FusionDirection::VisibleQuery).unwrap();

        // explicit-loop oracle: projections, scores, softmax, weighted sum
        let d = 4usize;
        let n = 3usize;
        let proj = |x: &Array2<f64>, w: &ArrayD<f64>| -> Array2<f64> {
            let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = Array2::zeros((n, d));
            for i in 0..n {
                for r in 0..d {
                    for c in 0..d {
                        out[[i, r]] += w2[[r, c]] * x[[i, c]];
                    }
                }
            }
            out
        };
        let q = proj(&f_tv, &params.w_query);
        let k = proj(&f_tr, &params.w_key);
        let v = proj(&f_tr, &params.w_value);
        let mut expect = Array2::zeros((n, d));
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                for c in 0..d {
                    scores[j] += q[[i, c]] * k[[j, c]];
                }
                scores[j] /= (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut mixed = vec![0.0; d];
            for j in 0..n {
                for c in 0..d {
                    mixed[c] += exps[j] / z * v[[j, c]];
                }
            }
            let w2 = params.w_combine.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += w2[[r, c]] * mixed[c];
                }
                expect[[i, r]] = f_tv[[i, r]] + acc;
            }
        }
        for i in 0..n {
            for c in 0..d {
                assert!((fused[[i, c]] - expect[[i, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FusionParams::init(&mut rng, 6);
        let f_tv = random_bank(&mut rng, 7, 6);
        let f_tr = random_bank(&mut rng, 7, 6);
        let tape = Tape::new();
        let vars = params.mount(&tape, false);
        let (_, attn) = attention_fuse_with_weights(
            &vars,
            tape.constant(f_tv.into_dyn()),
            tape.constant(f_tr.into_dyn()),
        )
        .unwrap();
        let a = attn.value();
        let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for i in 0..7 {
            let row_sum: f64 = a2.row(i).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for &v in a2.row(i) {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn joint_row_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = FusionParams::init(&mut rng, 4);
        params.w_combine = random_bank(&mut rng, 4, 4).into_dyn();
        let f_tv = random_bank(&mut rng, 5, 4);
        let f_tr = random_bank(&mut rng, 5, 4);
        let fused =
            attention_fuse_eval(&params, &f_tv, &f_tr, FusionDirection::VisibleQuery).unwrap();

        let perm = [3usize, 1, 4, 0, 2];
        let permute = |x: &Array2<f64>| Array2::from_shape_fn((5, 4), |(i, j)| x[[perm[i], j]]);
        let fused_p = attention_fuse_eval(
            &params,
            &permute(&f_tv),
            &permute(&f_tr),
            FusionDirection::VisibleQuery,
        )
        .unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert!((fused_p[[i, j]] - fused[[perm[i], j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infrared_query_mirrors_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FusionParams::init(&mut rng, 4);
        let f_tv = random_bank(&mut rng, 3, 4);
        let f_tr = random_bank(&mut rng, 3, 4);
        // with w_combine = 0 the residual reveals which bank is Query
        let fused =
            attention_fuse_eval(&params, &f_tv, &f_tr, FusionDirection::InfraredQuery).unwrap();
        assert_eq!(fused, f_tr);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = FusionParams::init(&mut rng, 4);
        let f_tv = random_bank(&mut rng, 3, 4);
        let f_tr = random_bank(&mut rng, 2, 4);
        let err = attention_fuse_eval(&params, &f_tv, &f_tr, FusionDirection::VisibleQuery)
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
