//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use tetnp::attention::{AttentionBlock, AttentionParams, TeAttentionBlock, TeAttentionParams};
use tetnp::nn::{LayerNorm, Mlp, ParamStore, LAYER_NORM_EPS};
use tetnp::Tensor;

pub fn mlp_loop(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (li, layer) in mlp.layers.iter().enumerate() {
        let w = store.get(layer.weight);
        let b = layer.bias.map_or_else(
            || vec![0.0; layer.out_dim],
            |b| store.get(b).data().to_vec(),
        );
        let mut out = vec![0.0; layer.out_dim];
        for j in 0..layer.out_dim {
            let mut acc = b[j];
            for (i, hi) in h.iter().enumerate() {
                acc += hi * w.get(i, j);
            }
            out[j] = if li < last { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

pub fn softmax_loop(logits: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = logits.iter().copied().filter(|v| v.is_finite()).collect();
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `(sum_k a[r][k] w[k][c])` for a weight block starting at column `c0`.
fn project(z: &Tensor, w: &Tensor, r: usize, c0: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| (0..z.cols()).map(|k| z.get(r, k) * w.get(k, c0 + c)).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-head dot-product logits `[h][n][m]`.
pub fn head_logits_loop(
    store: &ParamStore,
    a: &AttentionParams,
    zq: &Tensor,
    zkv: &Tensor,
) -> Vec<Vec<Vec<f64>>> {
    let d = a.dims;
    let (wq, wk) = (store.get(a.w_q), store.get(a.w_k));
    let scale = if d.scaled {
        1.0 / (d.qk_dim as f64).sqrt()
    } else {
        1.0
    };
    (0..d.heads)
        .map(|h| {
            (0..zq.rows())
                .map(|n| {
                    let q = project(zq, wq, n, h * d.qk_dim, d.qk_dim);
                    (0..zkv.rows())
                        .map(|m| scale * dot(&q, &project(zkv, wk, m, h * d.qk_dim, d.qk_dim)))
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `cat_h(sum_m w[h][n][m] v_h,m) W_O`.
pub fn combine_loop(
    store: &ParamStore,
    a: &AttentionParams,
    weights: &[Vec<Vec<f64>>],
    zkv: &Tensor,
) -> Tensor {
    let d = a.dims;
    let (wv, wo) = (store.get(a.w_v), store.get(a.w_o));
    let n = weights[0].len();
    let mut out = vec![0.0; n * d.token_dim];
    for r in 0..n {
        let mut cat = Vec::new();
        for (h, wh) in weights.iter().enumerate() {
            let mut acc = vec![0.0; d.value_dim];
            for m in 0..zkv.rows() {
                let v = project(zkv, wv, m, h * d.value_dim, d.value_dim);
                for (c, vc) in v.iter().enumerate() {
                    acc[c] += wh[r][m] * vc;
                }
            }
            cat.extend(acc);
        }
        for c in 0..d.token_dim {
            out[r * d.token_dim + c] = (0..cat.len()).map(|k| cat[k] * wo.get(k, c)).sum();
        }
    }
    Tensor::new(vec![n, d.token_dim], out).unwrap()
}

pub fn attention_loop(
    store: &ParamStore,
    a: &AttentionParams,
    zq: &Tensor,
    zkv: &Tensor,
    allowed: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let weights: Vec<Vec<Vec<f64>>> = head_logits_loop(store, a, zq, zkv)
        .into_iter()
        .map(|lh| {
            lh.into_iter()
                .enumerate()
                .map(|(n, row)| {
                    let masked: Vec<f64> = row
                        .iter()
                        .enumerate()
                        .map(|(m, l)| if allowed(n, m) { *l } else { f64::NEG_INFINITY })
                        .collect();
                    softmax_loop(&masked)
                })
                .collect()
        })
        .collect();
    combine_loop(store, a, &weights, zkv)
}

/// TE attention weights `[h][n][m]`.
pub fn te_weights_loop(
    store: &ParamStore,
    te: &TeAttentionParams,
    zq: &Tensor,
    xq: &Tensor,
    zkv: &Tensor,
    xkv: &Tensor,
) -> Vec<Vec<Vec<f64>>> {
    let heads = te.attn.dims.heads;
    let dots = head_logits_loop(store, &te.attn, zq, zkv);
    let (n, m) = (zq.rows(), zkv.rows());
    let mut logits = vec![vec![vec![0.0; m]; n]; heads];
    for i in 0..n {
        for j in 0..m {
            let mut input: Vec<f64> = (0..heads).map(|h| dots[h][i][j]).collect();
            input.extend((0..xq.cols()).map(|d| xq.get(i, d) - xkv.get(j, d)));
            let out = mlp_loop(store, &te.rho, &input);
            for h in 0..heads {
                logits[h][i][j] = out[h];
            }
        }
    }
    logits
        .into_iter()
        .map(|lh| lh.iter().map(|row| softmax_loop(row)).collect())
        .collect()
}

/// Token and location outputs of TE cross-attention (self-attention when the
/// query and key sets coincide).
pub fn te_attention_loop(
    store: &ParamStore,
    te: &TeAttentionParams,
    zq: &Tensor,
    xq: &Tensor,
    zkv: &Tensor,
    xkv: &Tensor,
) -> (Tensor, Tensor) {
    let w = te_weights_loop(store, te, zq, xq, zkv, xkv);
    let tokens = combine_loop(store, &te.attn, &w, zkv);
    let heads = te.attn.dims.heads;
    let (n, m, dx) = (zq.rows(), zkv.rows(), xq.cols());
    let mut locs = xq.to_vec();
    for i in 0..n {
        for j in 0..m {
            let alpha: Vec<f64> = (0..heads).map(|h| w[h][i][j]).collect();
            let phi = mlp_loop(store, &te.phi, &alpha);
            for h in 0..heads {
                for d in 0..dx {
                    locs[i * dx + d] += (xq.get(i, d) - xkv.get(j, d)) * phi[h] / m as f64;
                }
            }
        }
    }
    (tokens, Tensor::new(vec![n, dx], locs).unwrap())
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} exceeds {tol:e}");
}

pub fn layer_norm_loop(store: &ParamStore, ln: &LayerNorm, z: &Tensor) -> Tensor {
    let (gain, shift) = (store.get(ln.gain).data(), store.get(ln.shift).data());
    let c = z.cols();
    let mut out = Vec::with_capacity(z.numel());
    for r in 0..z.rows() {
        let row = z.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let s = (var + LAYER_NORM_EPS).sqrt();
        for j in 0..c {
            out.push(gain[j] * (row[j] - mean) / s + shift[j]);
        }
    }
    Tensor::new(z.shape().to_vec(), out).unwrap()
}

pub fn mlp_rows_loop(store: &ParamStore, mlp: &Mlp, x: &Tensor) -> Tensor {
    let mut out = Vec::new();
    for r in 0..x.rows() {
        out.extend(mlp_loop(store, mlp, x.row(r)));
    }
    Tensor::new(vec![x.rows(), mlp.out_dim()], out).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
    .unwrap()
}

/// Pre-norm residual cross-attention block followed by the residual MLP.
pub fn block_cross_loop(
    store: &ParamStore,
    b: &AttentionBlock,
    zq: &Tensor,
    zkv: &Tensor,
) -> Tensor {
    let qn = layer_norm_loop(store, &b.norm_attn, zq);
    let kn = layer_norm_loop(store, &b.norm_attn, zkv);
    let h = add(zq, &attention_loop(store, &b.attn, &qn, &kn, |_, _| true));
    add(
        &h,
        &mlp_rows_loop(store, &b.ff, &layer_norm_loop(store, &b.norm_ff, &h)),
    )
}

/// TE block: returns tokens and (optionally updated) query locations.
pub fn te_block_cross_loop(
    store: &ParamStore,
    b: &TeAttentionBlock,
    (zq, xq): (&Tensor, &Tensor),
    (zk, xk): (&Tensor, &Tensor),
    update: bool,
) -> (Tensor, Tensor) {
    let qn = layer_norm_loop(store, &b.norm_attn, zq);
    let kn = layer_norm_loop(store, &b.norm_attn, zk);
    let (att, locs) = te_attention_loop(store, &b.attn, &qn, xq, &kn, xk);
    let h = add(zq, &att);
    let z = add(
        &h,
        &mlp_rows_loop(store, &b.ff, &layer_norm_loop(store, &b.norm_ff, &h)),
    );
    (z, if update { locs } else { xq.clone() })
}

/// Decoder MLP then mean / softplus variance split.
pub fn decode_loop(store: &ParamStore, mlp: &Mlp, z: &Tensor) -> (Tensor, Tensor) {
    let raw = mlp_rows_loop(store, mlp, z);
    let d = raw.cols() / 2;
    let (mut mean, mut var) = (Vec::new(), Vec::new());
    for r in 0..raw.rows() {
        for j in 0..d {
            mean.push(raw.get(r, j));
            var.push((1.0 + raw.get(r, d + j).exp()).ln() + 1e-8);
        }
    }
    (
        Tensor::new(vec![raw.rows(), d], mean).unwrap(),
        Tensor::new(vec![raw.rows(), d], var).unwrap(),
    )
}
