//! Brute-force references. Everything here is written with plain scalar
//! loops and explicit intermediate matrices, independent of the batched
//! kernels it checks; agreement is asserted by the invariant suite, never
//! assumed.

use ndarray::{Array2, Array3};

use crate::attention::{BackboneWeights, Linear, Mlp, SetBatch};
use crate::backbone::{run_backbone, BackboneInputs, BackboneParams, BackboneRun, DispatchMode};
use crate::error::Result;
use crate::geometry::PseudoDepthTable;

/// Textbook per-set attention layer with an explicit tau x tau score
/// matrix per head; no batching, no shared numeric kernels.
pub fn dense_attention_layer(
    batch: &SetBatch,
    weights: &BackboneWeights,
    layer: usize,
) -> Array3<f32> {
    let (s, tau, c) = batch.features.dim();
    let lw = &weights.layers[layer];
    let heads = weights.heads;
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut out = Array3::<f32>::zeros((s, tau, c));
    for set in 0..s {
        // x = features + PE(coords)
        let mut x: Vec<Vec<f64>> = (0..tau)
            .map(|k| {
                let coord: Vec<f64> = (0..3)
                    .map(|a| f64::from(batch.pe_coords[(set, k, a)]))
                    .collect();
                let pe = mlp_scalar(&lw.pos_mlp, &coord);
                (0..c)
                    .map(|ch| f64::from(batch.features[(set, k, ch)]) + pe[ch])
                    .collect()
            })
            .collect();

        // Q, K, V projections.
        let q: Vec<Vec<f64>> = x.iter().map(|r| linear_scalar(&lw.query, r)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| linear_scalar(&lw.key, r)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| linear_scalar(&lw.value, r)).collect();

        // Per-head score matrix, softmax, weighted values.
        let mut attn = vec![vec![0.0f64; c]; tau];
        for h in 0..heads {
            let off = h * hd;
            let mut scores = vec![vec![0.0f64; tau]; tau];
            for i in 0..tau {
                for j in 0..tau {
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += q[i][off + d] * k[j][off + d];
                    }
                    scores[i][j] = dot * scale;
                }
            }
            for i in 0..tau {
                let max = scores[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores[i].iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..tau {
                    let w = exps[j] / sum;
                    for d in 0..hd {
                        attn[i][off + d] += w * v[j][off + d];
                    }
                }
            }
        }

        // Output projection, residual, norm; FFN, residual, norm.
        for i in 0..tau {
            let o = linear_scalar(&lw.output, &attn[i]);
            for ch in 0..c {
                x[i][ch] += o[ch];
            }
            layer_norm_scalar(&mut x[i], &lw.norm_attn.gain, &lw.norm_attn.bias);
            let mut hidden = linear_scalar(&lw.ffn.fc1, &x[i]);
            for hv in hidden.iter_mut() {
                *hv = hv.max(0.0);
            }
            let f2 = linear_scalar(&lw.ffn.fc2, &hidden);
            for ch in 0..c {
                x[i][ch] += f2[ch];
            }
            layer_norm_scalar(&mut x[i], &lw.norm_ffn.gain, &lw.norm_ffn.bias);
            for ch in 0..c {
                out[(set, i, ch)] = x[i][ch] as f32;
            }
        }
    }
    out
}

fn linear_scalar(l: &Linear, x: &[f64]) -> Vec<f64> {
    let (ins, outs) = (l.weight.nrows(), l.weight.ncols());
    debug_assert_eq!(ins, x.len());
    (0..outs)
        .map(|o| {
            let mut acc = f64::from(l.bias[o]);
            for (i, xi) in x.iter().enumerate() {
                acc += f64::from(l.weight[(i, o)]) * xi;
            }
            acc
        })
        .collect()
}

fn mlp_scalar(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = linear_scalar(&m.fc1, x);
    for v in h.iter_mut() {
        *v = match m.act {
            crate::attention::Activation::Tanh => v.tanh(),
            crate::attention::Activation::Relu => v.max(0.0),
        };
    }
    linear_scalar(&m.fc2, &h)
}

fn layer_norm_scalar(x: &mut [f64], gain: &ndarray::Array1<f32>, bias: &ndarray::Array1<f32>) {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv = 1.0 / (var + 1e-5).sqrt();
    for (i, v) in x.iter_mut().enumerate() {
        *v = (*v - mean) * inv * f64::from(gain[i]) + f64::from(bias[i]);
    }
}

/// The serial reference path: identical math with per-modality dispatch
/// grouping; certifies parallel-path equivalence and dispatch accounting.
pub fn oracle_serial_backbone(
    inputs: &BackboneInputs,
    params: &BackboneParams,
    weights: &BackboneWeights,
) -> Result<BackboneRun> {
    run_backbone(inputs, params, weights, DispatchMode::Serial)
}

/// Exhaustive linear-scan nearest neighbor over one view of the table,
/// with the same lowest-index tie rule as the engine.
pub fn exhaustive_nearest(
    table: &PseudoDepthTable,
    pixel: (f64, f64),
    view: usize,
) -> Option<(f64, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    for (id, p) in table.view_points(view) {
        let dx = p.x - pixel.0;
        let dy = p.y - pixel.1;
        let d2 = dx * dx + dy * dy;
        let better = match best {
            None => true,
            Some((bd2, bid, _)) => d2 < bd2 || (d2 == bd2 && id < bid),
        };
        if better {
            best = Some((d2, id, p.depth));
        }
    }
    best.map(|(d2, _, depth)| (depth, d2.sqrt()))
}

/// Max absolute difference between two equally shaped f32 arrays.
pub fn max_abs_diff(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_2d(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}
