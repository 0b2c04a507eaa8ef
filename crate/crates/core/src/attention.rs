//! Scaled dot-product and multi-head attention.
//!
//! Masks are row-major `a x b` boolean matrices where `true` blocks the
//! (query, key) pair. Blocked logits receive a `-1e9` penalty before the
//! softmax, so their weights are exactly zero and gradients stay exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Lcg64;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    pub model_dim: usize,
    pub heads: usize,
}

impl Default for MultiHeadConfig {
    fn default() -> Self {
        Self {
            model_dim: 512,
            heads: 8,
        }
    }
}

impl MultiHeadConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Projection weights. Each of `wq`, `wk`, `wv` is `d x d` and holds the
/// per-head `d x head_dim` blocks side by side (head `i` owns columns
/// `i*head_dim .. (i+1)*head_dim`); `wo` is `d x d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadParams {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        config: &MultiHeadConfig,
        rng: &mut Lcg64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        Ok(Self {
            wq: store.add(format!("{prefix}.wq"), &[d, d], Init::Glorot, rng)?,
            wk: store.add(format!("{prefix}.wk"), &[d, d], Init::Glorot, rng)?,
            wv: store.add(format!("{prefix}.wv"), &[d, d], Init::Glorot, rng)?,
            wo: store.add(format!("{prefix}.wo"), &[d, d], Init::Glorot, rng)?,
        })
    }
}

/// Blocks every key column whose position is padding.
pub fn key_padding_mask(query_rows: usize, key_valid: &[bool]) -> Vec<bool> {
    (0..query_rows)
        .flat_map(|_| key_valid.iter().map(|&v| !v))
        .collect()
}

/// Blocks keys strictly after the query position.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n).flat_map(|i| (0..n).map(move |j| j > i)).collect()
}

/// Elementwise OR of two optional masks.
pub fn combine_masks(a: Option<Vec<bool>>, b: Option<Vec<bool>>) -> Option<Vec<bool>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(&x, &y)| x || y).collect()),
        (a, None) => a,
        (None, b) => b,
    }
}

/// `softmax(Q K^T / sqrt(dk)) V`. Returns `(context, weights)`.
pub fn scaled_dot_attention<F: Real>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    blocked: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let dk = g.shape(q).last().copied().unwrap_or(1);
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::Shape {
            op: "attention",
            left: g.shape(k).to_vec(),
            right: g.shape(v).to_vec(),
        });
    }
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax_rows(scores, blocked)?;
    let context = g.matmul(weights, v)?;
    Ok((context, weights))
}

/// Multi-head attention; output has one row per row of `q_in`.
pub fn multi_head<F: Real>(
    g: &mut Graph<'_, F>,
    config: &MultiHeadConfig,
    params: &MultiHeadParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    blocked: Option<&[bool]>,
) -> Result<Var> {
    multi_head_with_weights(g, config, params, q_in, k_in, v_in, blocked).map(|(out, _)| out)
}

/// Like [`multi_head`], also returning each head's attention weights.
pub fn multi_head_with_weights<F: Real>(
    g: &mut Graph<'_, F>,
    config: &MultiHeadConfig,
    params: &MultiHeadParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    blocked: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let d = config.model_dim;
    for x in [q_in, k_in, v_in] {
        if g.value(x).cols() != d {
            return Err(Error::Shape {
                op: "multi_head",
                left: g.shape(x).to_vec(),
                right: vec![d],
            });
        }
    }
    let hd = config.head_dim();
    let (wq, wk, wv, wo) = (
        g.param(params.wq),
        g.param(params.wk),
        g.param(params.wv),
        g.param(params.wo),
    );
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(k_in, wk)?;
    let v = g.matmul(v_in, wv)?;
    let mut heads = Vec::with_capacity(config.heads);
    let mut weights = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (qh, kh, vh) = if config.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, hd)?,
                g.slice_cols(k, h * hd, hd)?,
                g.slice_cols(v, h * hd, hd)?,
            )
        };
        let (ctx, w) = scaled_dot_attention(g, qh, kh, vh, blocked)?;
        heads.push(ctx);
        weights.push(w);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok((g.matmul(concat, wo)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rand_matrix(rng: &mut Lcg64, r: usize, c: usize) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Direct scalar evaluation of softmax(QK^T/sqrt(dk))V.
    fn oracle_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, blocked: Option<&[bool]>) -> Vec<Vec<f64>> {
        let (a, b, dk, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
        let mut out = vec![vec![0.0; dv]; a];
        for i in 0..a {
            let mut s: Vec<f64> = (0..b)
                .map(|j| (0..dk).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            if let Some(m) = blocked {
                for j in 0..b {
                    if m[i * b + j] {
                        s[j] = f64::NEG_INFINITY;
                    }
                }
            }
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..b {
                for c in 0..dv {
                    out[i][c] += e[j] / z * v.get(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn singleton_key() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = g.input(Tensor::from_rows(&[vec![0.3, -1.0]]));
        let k = g.input(Tensor::from_rows(&[vec![2.0, 1.0]]));
        let v = g.input(Tensor::from_rows(&[vec![5.0, 6.0, 7.0]]));
        let (ctx, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut rng = Lcg64::new(2);
        let q = g.input(rand_matrix(&mut rng, 3, 2));
        let k = g.input(Tensor::from_rows(&vec![vec![0.5, 0.2]; 4]));
        let v = g.input(rand_matrix(&mut rng, 4, 3));
        let (_, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = Lcg64::new(11);
        let (qt, kt, vt) = (
            rand_matrix(&mut rng, 3, 2),
            rand_matrix(&mut rng, 4, 2),
            rand_matrix(&mut rng, 4, 3),
        );
        let blocked = [false, true, false, false, false, false, true, false, true, false, false, false];
        for mask in [None, Some(&blocked[..])] {
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
            let (ctx, _) = scaled_dot_attention(&mut g, q, k, v, mask).unwrap();
            let expected = oracle_attention(&qt, &kt, &vt, mask);
            for i in 0..3 {
                for c in 0..3 {
                    assert!((g.value(ctx).get(i, c) - expected[i][c]).abs() < 1e-6);
                }
            }
        }
    }

    fn set_identity(store: &mut ParamStore<f64>, p: &MultiHeadParams, d: usize) {
        for id in [p.wq, p.wk, p.wv, p.wo] {
            store.set_value(id, Tensor::identity(d)).unwrap();
        }
    }

    #[test]
    fn single_identity_head_is_plain_attention() {
        let cfg = MultiHeadConfig { model_dim: 3, heads: 1 };
        let mut rng = Lcg64::new(5);
        let mut store = ParamStore::<f64>::new();
        let p = MultiHeadParams::register(&mut store, "mh", &cfg, &mut rng).unwrap();
        set_identity(&mut store, &p, 3);
        let (qt, kt) = (rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 4, 3));
        let vt = rand_matrix(&mut rng, 4, 3);
        let mut g = Graph::new(&store);
        let (q, k, v) = (g.input(qt), g.input(kt), g.input(vt));
        let out = multi_head(&mut g, &cfg, &p, q, k, v, None).unwrap();
        let (plain, _) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(plain)) < 1e-12);
    }

    #[test]
    fn padding_column_zero_in_every_head() {
        let cfg = MultiHeadConfig { model_dim: 4, heads: 2 };
        let mut rng = Lcg64::new(8);
        let mut store = ParamStore::<f64>::new();
        let p = MultiHeadParams::register(&mut store, "mh", &cfg, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let q = g.input(rand_matrix(&mut rng, 3, 4));
        let kv = g.input(rand_matrix(&mut rng, 5, 4));
        let mask = key_padding_mask(3, &[true, true, false, true, true]);
        let (_, ws) = multi_head_with_weights(&mut g, &cfg, &p, q, kv, kv, Some(&mask)).unwrap();
        for w in ws {
            for i in 0..3 {
                assert_eq!(g.value(w).get(i, 2), 0.0);
            }
        }
    }

    #[test]
    fn two_heads_match_unbatched_reference() {
        let cfg = MultiHeadConfig { model_dim: 4, heads: 2 };
        let mut rng = Lcg64::new(13);
        let mut store = ParamStore::<f64>::new();
        let p = MultiHeadParams::register(&mut store, "mh", &cfg, &mut rng).unwrap();
        let (qt, kt, vt) = (
            rand_matrix(&mut rng, 3, 4),
            rand_matrix(&mut rng, 5, 4),
            rand_matrix(&mut rng, 5, 4),
        );
        let mut g = Graph::new(&store);
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let out = multi_head(&mut g, &cfg, &p, q, k, v, None).unwrap();

        // Reference: each head with its own 4x2 weight block, by hand.
        let w = |id: ParamId| store.get(id).value.clone();
        let block = |m: &Tensor<f64>, h: usize| {
            let rows: Vec<Vec<f64>> = (0..4).map(|r| vec![m.get(r, 2 * h), m.get(r, 2 * h + 1)]).collect();
            Tensor::from_rows(&rows)
        };
        let mut concat = vec![vec![0.0; 4]; 3];
        for h in 0..2 {
            let qh = qt.matmul(&block(&w(p.wq), h)).unwrap();
            let kh = kt.matmul(&block(&w(p.wk), h)).unwrap();
            let vh = vt.matmul(&block(&w(p.wv), h)).unwrap();
            let ctx = oracle_attention(&qh, &kh, &vh, None);
            for i in 0..3 {
                concat[i][2 * h] = ctx[i][0];
                concat[i][2 * h + 1] = ctx[i][1];
            }
        }
        let expected = Tensor::from_rows(&concat).matmul(&w(p.wo)).unwrap();
        assert!(g.value(out).max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(MultiHeadConfig { model_dim: 6, heads: 4 }.validate().is_err());
    }
}
