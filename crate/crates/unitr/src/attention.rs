//! The shared numeric core: multi-head self-attention over fixed-size
//! token sets, feed-forward network, layer normalization, and coordinate
//! positional encoding.
//!
//! One parameter store serves every modality and every partition space;
//! no tensor in the store is modality-indexed. Features are stored as f32,
//! all arithmetic runs in f64, and per-set computation is order-independent
//! so parallel execution reproduces the sequential result bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::container::{TensorContainer, TensorData, TensorEntry};
use crate::rng;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Counts attention kernel invocations. The unit in which the parallel
/// versus serial efficiency contract is expressed.
#[derive(Debug, Default)]
pub struct DispatchCounter(AtomicU64);

impl DispatchCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn total(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// `y = x W + b` with `W` stored input-major (`in x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward_f64(&self, x: ArrayView2<f64>) -> Array2<f64> {
        affine(x, &lift2(&self.weight), &lift1(&self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Two-layer pointwise MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn forward_f64(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.fc1.forward_f64(x);
        apply_activation(&mut h, self.act);
        self.fc2.forward_f64(h.view())
    }
}

fn apply_activation(x: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Tanh => x.mapv_inplace(f64::tanh),
        Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

/// Parameters of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_attn: LayerNormParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: Mlp,
    pub pos_mlp: Mlp,
}

/// Structural description of a weight store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsSpec {
    pub channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Input width of the voxel feature encoder (3 + extra feature dim).
    pub voxel_in_dim: usize,
    /// Input width of the patch embedding (patch * patch * 3).
    pub patch_in_dim: usize,
}

#[derive(Debug, Clone, Copy)]
enum ScaleRule {
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    InvSqrtFanIn,
    /// Uniform with the given standard deviation, any fan-in.
    FixedStd(f64),
}

/// The single parameter store used by every modality and block.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub seed: u64,
    pub channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: Vec<LayerWeights>,
    /// Voxel feature encoder: centered point coordinates plus extras to C.
    pub voxel_embed: Linear,
    /// Patch embedding: flattened raw patch RGB to C.
    pub patch_embed: Linear,
    /// Maps the scalar distance-to-nearest-virtual-point to a C-vector.
    pub offset_mlp: Mlp,
}

impl BackboneWeights {
    /// Seeded initialization: every tensor draws from its own named stream,
    /// uniform scaled by 1/sqrt(fan_in); layer-norm gain 1, bias 0.
    pub fn seeded(seed: u64, spec: &WeightsSpec) -> Self {
        Self::build(seed, spec, ScaleRule::InvSqrtFanIn)
    }

    /// Same structure with all projection entries at a fixed standard
    /// deviation; the stacked-layer hygiene check uses this.
    pub fn seeded_with_std(seed: u64, spec: &WeightsSpec, std: f64) -> Self {
        Self::build(seed, spec, ScaleRule::FixedStd(std))
    }

    fn build(seed: u64, spec: &WeightsSpec, rule: ScaleRule) -> Self {
        assert!(spec.channels.is_multiple_of(spec.heads), "channels must divide into heads");
        let c = spec.channels;
        let h = spec.hidden;
        let linear = |name: &str, ins: usize, outs: usize| -> Linear {
            let half = match rule {
                ScaleRule::InvSqrtFanIn => 1.0 / (ins as f64).sqrt(),
                ScaleRule::FixedStd(std) => std * 3.0f64.sqrt(),
            };
            let mut wrng = rng::stream(seed, &format!("init.{name}.weight"));
            let weight = Array2::from_shape_fn((ins, outs), |_| {
                wrng.random_range(-half..half) as f32
            });
            let mut brng = rng::stream(seed, &format!("init.{name}.bias"));
            let bias = Array1::from_shape_fn(outs, |_| brng.random_range(-half..half) as f32);
            Linear { weight, bias }
        };
        let norm = || LayerNormParams { gain: Array1::ones(c), bias: Array1::zeros(c) };
        let mlp = |name: &str, ins: usize, act: Activation| Mlp {
            fc1: linear(&format!("{name}.fc1"), ins, h),
            fc2: linear(&format!("{name}.fc2"), h, c),
            act,
        };

        let layers = (0..spec.layers)
            .map(|l| LayerWeights {
                query: linear(&format!("layers.{l}.attn.query"), c, c),
                key: linear(&format!("layers.{l}.attn.key"), c, c),
                value: linear(&format!("layers.{l}.attn.value"), c, c),
                output: linear(&format!("layers.{l}.attn.output"), c, c),
                norm_attn: norm(),
                norm_ffn: norm(),
                ffn: mlp(&format!("layers.{l}.ffn"), c, Activation::Relu),
                pos_mlp: mlp(&format!("layers.{l}.pos"), 3, Activation::Tanh),
            })
            .collect();

        Self {
            seed,
            channels: c,
            hidden: h,
            heads: spec.heads,
            layers,
            voxel_embed: linear("tokenizer.voxel", spec.voxel_in_dim, c),
            patch_embed: linear("tokenizer.patch", spec.patch_in_dim, c),
            offset_mlp: mlp("offset", 1, Activation::Tanh),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Visit every named tensor in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, Vec<u64>, &[f32])) {
        fn lin(f: &mut impl FnMut(&str, Vec<u64>, &[f32]), name: &str, l: &Linear) {
            f(
                &format!("{name}.weight"),
                vec![l.weight.nrows() as u64, l.weight.ncols() as u64],
                l.weight.as_slice().unwrap(),
            );
            f(&format!("{name}.bias"), vec![l.bias.len() as u64], l.bias.as_slice().unwrap());
        }
        fn norm(f: &mut impl FnMut(&str, Vec<u64>, &[f32]), name: &str, n: &LayerNormParams) {
            f(&format!("{name}.gain"), vec![n.gain.len() as u64], n.gain.as_slice().unwrap());
            f(&format!("{name}.bias"), vec![n.bias.len() as u64], n.bias.as_slice().unwrap());
        }
        lin(&mut f, "tokenizer.voxel", &self.voxel_embed);
        lin(&mut f, "tokenizer.patch", &self.patch_embed);
        lin(&mut f, "offset.fc1", &self.offset_mlp.fc1);
        lin(&mut f, "offset.fc2", &self.offset_mlp.fc2);
        for (i, l) in self.layers.iter().enumerate() {
            lin(&mut f, &format!("layers.{i}.attn.query"), &l.query);
            lin(&mut f, &format!("layers.{i}.attn.key"), &l.key);
            lin(&mut f, &format!("layers.{i}.attn.value"), &l.value);
            lin(&mut f, &format!("layers.{i}.attn.output"), &l.output);
            lin(&mut f, &format!("layers.{i}.ffn.fc1"), &l.ffn.fc1);
            lin(&mut f, &format!("layers.{i}.ffn.fc2"), &l.ffn.fc2);
            lin(&mut f, &format!("layers.{i}.pos.fc1"), &l.pos_mlp.fc1);
            lin(&mut f, &format!("layers.{i}.pos.fc2"), &l.pos_mlp.fc2);
            norm(&mut f, &format!("layers.{i}.norm_attn"), &l.norm_attn);
            norm(&mut f, &format!("layers.{i}.norm_ffn"), &l.norm_ffn);
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|n, _, _| names.push(n.to_string()));
        names
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.push(TensorEntry::i64("meta.seed", vec![1], vec![self.seed as i64]));
        c.push(TensorEntry::i64(
            "meta.shape",
            vec![6],
            vec![
                self.channels as i64,
                self.hidden as i64,
                self.heads as i64,
                self.layers.len() as i64,
                self.voxel_embed.in_dim() as i64,
                self.patch_embed.in_dim() as i64,
            ],
        ));
        self.for_each_tensor(|name, dims, data| {
            c.push(TensorEntry::f32(name, dims, data.to_vec()));
        });
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let meta = match &c.get("meta.shape").ok_or_else(|| Error::Container("missing meta.shape".into()))?.data {
            TensorData::I64(v) if v.len() == 6 => v.clone(),
            _ => return Err(Error::Container("meta.shape must be i64[6]".into())),
        };
        let seed = match &c.get("meta.seed").ok_or_else(|| Error::Container("missing meta.seed".into()))?.data {
            TensorData::I64(v) if v.len() == 1 => v[0] as u64,
            _ => return Err(Error::Container("meta.seed must be i64[1]".into())),
        };
        let spec = WeightsSpec {
            channels: meta[0] as usize,
            hidden: meta[1] as usize,
            heads: meta[2] as usize,
            layers: meta[3] as usize,
            voxel_in_dim: meta[4] as usize,
            patch_in_dim: meta[5] as usize,
        };
        // Rebuild the skeleton, then overwrite every tensor from the file.
        let mut w = Self::seeded(seed, &spec);
        let fetch = |name: &str, want: usize| -> Result<Vec<f32>> {
            match &c.get(name).ok_or_else(|| Error::Container(format!("missing `{name}`")))?.data {
                TensorData::F32(v) if v.len() == want => Ok(v.clone()),
                TensorData::F32(v) => Err(Error::Container(format!(
                    "`{name}` has {} values, expected {want}",
                    v.len()
                ))),
                _ => Err(Error::Container(format!("`{name}` has wrong dtype"))),
            }
        };
        let mut targets: Vec<(String, Vec<u64>)> = Vec::new();
        w.for_each_tensor(|n, dims, _| targets.push((n.to_string(), dims)));
        for (name, dims) in targets {
            let want: usize = dims.iter().product::<u64>() as usize;
            let data = fetch(&name, want)?;
            w.assign_tensor(&name, &data);
        }
        Ok(w)
    }

    fn assign_tensor(&mut self, name: &str, data: &[f32]) {
        let assign_lin = |l: &mut Linear, field: &str| match field {
            "weight" => {
                l.weight =
                    Array2::from_shape_vec((l.weight.nrows(), l.weight.ncols()), data.to_vec())
                        .unwrap()
            }
            "bias" => l.bias = Array1::from_vec(data.to_vec()),
            _ => panic!("unknown linear field {field}"),
        };
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["tokenizer", "voxel", f] => assign_lin(&mut self.voxel_embed, f),
            ["tokenizer", "patch", f] => assign_lin(&mut self.patch_embed, f),
            ["offset", "fc1", f] => assign_lin(&mut self.offset_mlp.fc1, f),
            ["offset", "fc2", f] => assign_lin(&mut self.offset_mlp.fc2, f),
            ["layers", i, rest @ ..] => {
                let l = &mut self.layers[i.parse::<usize>().unwrap()];
                match rest {
                    ["attn", "query", f] => assign_lin(&mut l.query, f),
                    ["attn", "key", f] => assign_lin(&mut l.key, f),
                    ["attn", "value", f] => assign_lin(&mut l.value, f),
                    ["attn", "output", f] => assign_lin(&mut l.output, f),
                    ["ffn", "fc1", f] => assign_lin(&mut l.ffn.fc1, f),
                    ["ffn", "fc2", f] => assign_lin(&mut l.ffn.fc2, f),
                    ["pos", "fc1", f] => assign_lin(&mut l.pos_mlp.fc1, f),
                    ["pos", "fc2", f] => assign_lin(&mut l.pos_mlp.fc2, f),
                    ["norm_attn", "gain"] => l.norm_attn.gain = Array1::from_vec(data.to_vec()),
                    ["norm_attn", "bias"] => l.norm_attn.bias = Array1::from_vec(data.to_vec()),
                    ["norm_ffn", "gain"] => l.norm_ffn.gain = Array1::from_vec(data.to_vec()),
                    ["norm_ffn", "bias"] => l.norm_ffn.bias = Array1::from_vec(data.to_vec()),
                    _ => panic!("unknown layer tensor {name}"),
                }
            }
            _ => panic!("unknown tensor {name}"),
        }
    }
}

/// A rectangular batch of attention sets. The mask is true for every slot:
/// duplication, not padding, fills undersized sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SetBatch {
    /// `num_sets x tau x channels`.
    pub features: Array3<f32>,
    /// Window-relative coordinates scaled to [-1, 1] per axis.
    pub pe_coords: Array3<f32>,
    pub mask: Array2<bool>,
}

impl SetBatch {
    pub fn new(features: Array3<f32>, pe_coords: Array3<f32>) -> Self {
        let (s, tau, _) = features.dim();
        debug_assert_eq!(pe_coords.dim().0, s);
        debug_assert_eq!(pe_coords.dim().1, tau);
        debug_assert_eq!(pe_coords.dim().2, 3);
        Self { features, pe_coords, mask: Array2::from_elem((s, tau), true) }
    }

    pub fn empty(tau: usize, channels: usize) -> Self {
        Self::new(Array3::zeros((0, tau, channels)), Array3::zeros((0, tau, 3)))
    }

    pub fn num_sets(&self) -> usize {
        self.features.dim().0
    }

    pub fn tau(&self) -> usize {
        self.features.dim().1
    }

    pub fn channels(&self) -> usize {
        self.features.dim().2
    }
}

/// Pointwise two-layer MLP over normalized set coordinates; the result is
/// added to features before attention.
pub fn positional_encode(coords: ArrayView3<f32>, pe: &Mlp) -> Array3<f32> {
    let (s, tau, _) = coords.dim();
    let flat = lift_to_2d(&coords, 3);
    let out = pe.forward_f64(flat.view());
    let c = out.ncols();
    Array3::from_shape_vec((s, tau, c), out.iter().map(|v| *v as f32).collect()).unwrap()
}

/// One full attention layer over every set in the batch, independently per
/// set: residual attention then residual FFN, each post-normalized, with
/// softmax restricted to the tau keys of the same set.
///
/// Counts as one dispatch when the batch is non-empty.
pub fn set_attention_layer(
    batch: &SetBatch,
    weights: &BackboneWeights,
    layer: usize,
    counter: &DispatchCounter,
) -> Result<SetBatch> {
    let (s, tau, c) = batch.features.dim();
    if c != weights.channels {
        return Err(Error::ShapeMismatch(format!(
            "batch has {c} channels, weights expect {}",
            weights.channels
        )));
    }
    if s == 0 {
        return Ok(batch.clone());
    }
    counter.bump();
    debug_assert!(batch.mask.iter().all(|m| *m), "sets are filled by duplication, not padding");

    let lw = &weights.layers[layer];
    let x0 = lift_to_2d(&batch.features.view(), c);
    let pe = lw.pos_mlp.forward_f64(lift_to_2d(&batch.pe_coords.view(), 3).view());
    let mut x = x0;
    x += &pe;

    let q = lw.query.forward_f64(x.view());
    let k = lw.key.forward_f64(x.view());
    let v = lw.value.forward_f64(x.view());

    let heads = weights.heads;
    let head_dim = weights.head_dim();
    let mut attn = Array2::<f64>::zeros((s * tau, c));
    {
        let qs = q.as_slice().unwrap();
        let ks = k.as_slice().unwrap();
        let vs = v.as_slice().unwrap();
        attn.as_slice_mut()
            .unwrap()
            .par_chunks_mut(tau * c)
            .enumerate()
            .for_each(|(set, out)| {
                let base = set * tau * c;
                attend_one_set(
                    &qs[base..base + tau * c],
                    &ks[base..base + tau * c],
                    &vs[base..base + tau * c],
                    tau,
                    c,
                    heads,
                    head_dim,
                    out,
                );
            });
    }

    let o = lw.output.forward_f64(attn.view());
    x += &o;
    layer_norm_rows(&mut x, &lw.norm_attn);

    let f2 = lw.ffn.forward_f64(x.view());
    x += &f2;
    layer_norm_rows(&mut x, &lw.norm_ffn);

    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer });
    }

    let features =
        Array3::from_shape_vec((s, tau, c), x.iter().map(|v| *v as f32).collect()).unwrap();
    Ok(SetBatch { features, pe_coords: batch.pe_coords.clone(), mask: batch.mask.clone() })
}

/// Per-head attention probabilities the engine computes for one-set input,
/// exposed so invariant checks can assert on the engine's own softmax.
pub fn attention_probabilities(
    batch: &SetBatch,
    weights: &BackboneWeights,
    layer: usize,
    set: usize,
) -> Vec<Array2<f64>> {
    let (_, tau, c) = batch.features.dim();
    let lw = &weights.layers[layer];
    let x0 = lift_to_2d(&batch.features.view(), c);
    let pe = lw.pos_mlp.forward_f64(lift_to_2d(&batch.pe_coords.view(), 3).view());
    let mut x = x0;
    x += &pe;
    let q = lw.query.forward_f64(x.view());
    let k = lw.key.forward_f64(x.view());
    let head_dim = weights.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let base = set * tau;
    (0..weights.heads)
        .map(|h| {
            let mut probs = Array2::<f64>::zeros((tau, tau));
            for i in 0..tau {
                let qi = q.row(base + i);
                let mut row: Vec<f64> = (0..tau)
                    .map(|j| {
                        let kj = k.row(base + j);
                        let mut dot = 0.0;
                        for d in 0..head_dim {
                            dot += qi[h * head_dim + d] * kj[h * head_dim + d];
                        }
                        dot * scale
                    })
                    .collect();
                softmax_in_place(&mut row);
                for j in 0..tau {
                    probs[(i, j)] = row[j];
                }
            }
            probs
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn attend_one_set(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tau: usize,
    c: usize,
    heads: usize,
    head_dim: usize,
    out: &mut [f64],
) {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut scores = vec![0.0f64; tau];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..tau {
            let qi = &q[i * c + off..i * c + off + head_dim];
            for (j, slot) in scores.iter_mut().enumerate() {
                let kj = &k[j * c + off..j * c + off + head_dim];
                let mut dot = 0.0;
                for d in 0..head_dim {
                    dot += qi[d] * kj[d];
                }
                *slot = dot * scale;
            }
            softmax_in_place(&mut scores);
            let oi = &mut out[i * c + off..i * c + off + head_dim];
            oi.fill(0.0);
            for (j, w) in scores.iter().enumerate() {
                let vj = &v[j * c + off..j * c + off + head_dim];
                for d in 0..head_dim {
                    oi[d] += w * vj[d];
                }
            }
        }
    }
}

/// Max-subtracted softmax.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn layer_norm_rows(x: &mut Array2<f64>, params: &LayerNormParams) {
    let gain = lift1(&params.gain);
    let bias = lift1(&params.bias);
    let c = x.ncols();
    x.axis_iter_mut(Axis(0)).for_each(|mut row| {
        let mean = row.sum() / c as f64;
        let mut var = 0.0;
        for v in row.iter() {
            var += (v - mean) * (v - mean);
        }
        var /= c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[i] + bias[i];
        }
    });
}

/// Concatenate the two modality batches along the set axis, issue exactly
/// one attention dispatch, and split the results back. A batch with zero
/// sets degenerates to single-modality processing.
pub fn batched_layer_over_modalities(
    lidar: &SetBatch,
    image: &SetBatch,
    weights: &BackboneWeights,
    layer: usize,
    counter: &DispatchCounter,
) -> Result<(SetBatch, SetBatch)> {
    if lidar.num_sets() == 0 {
        return Ok((lidar.clone(), set_attention_layer(image, weights, layer, counter)?));
    }
    if image.num_sets() == 0 {
        return Ok((set_attention_layer(lidar, weights, layer, counter)?, image.clone()));
    }
    if lidar.tau() != image.tau() {
        return Err(Error::TauMismatch { left: lidar.tau(), right: image.tau() });
    }
    let fused = SetBatch::new(
        ndarray::concatenate(Axis(0), &[lidar.features.view(), image.features.view()]).unwrap(),
        ndarray::concatenate(Axis(0), &[lidar.pe_coords.view(), image.pe_coords.view()]).unwrap(),
    );
    let out = set_attention_layer(&fused, weights, layer, counter)?;
    let split = lidar.num_sets();
    let (lf, imf) = out.features.view().split_at(Axis(0), split);
    Ok((
        SetBatch::new(lf.to_owned(), lidar.pe_coords.clone()),
        SetBatch::new(imf.to_owned(), image.pe_coords.clone()),
    ))
}

/// Row-parallel `x W + b`; rows are independent so the result is identical
/// to the sequential product.
fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, _) = x.dim();
    let out_dim = w.ncols();
    let mut out = Array2::<f64>::zeros((n, out_dim));
    let chunk = 1024;
    let w_view = w.view();
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(chunk * out_dim)
        .enumerate()
        .for_each(|(ci, dst)| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(n);
            let block = x.slice(ndarray::s![lo..hi, ..]).dot(&w_view);
            dst.copy_from_slice(block.as_slice().unwrap());
        });
    out += &b.view().insert_axis(Axis(0));
    out
}

fn lift_to_2d(a: &ArrayView3<f32>, cols: usize) -> Array2<f64> {
    let (s, tau, c) = a.dim();
    debug_assert_eq!(c, cols);
    let flat: Vec<f64> = a.iter().map(|v| f64::from(*v)).collect();
    Array2::from_shape_vec((s * tau, c), flat).unwrap()
}

fn lift2(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn lift1(a: &Array1<f32>) -> Array1<f64> {
    a.mapv(f64::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> WeightsSpec {
        WeightsSpec { channels: 8, hidden: 16, heads: 2, layers: 2, voxel_in_dim: 4, patch_in_dim: 12 }
    }

    fn random_batch(seed: u64, s: usize, tau: usize, c: usize) -> SetBatch {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, "attention.test.batch");
        let features = Array3::from_shape_fn((s, tau, c), |_| r.random_range(-1.0..1.0f32));
        let coords = Array3::from_shape_fn((s, tau, 3), |_| r.random_range(-1.0..1.0f32));
        SetBatch::new(features, coords)
    }

    #[test]
    fn singleton_set_attention_weight_is_one() {
        let w = BackboneWeights::seeded(1, &tiny_spec());
        let batch = random_batch(2, 1, 1, 8);
        let probs = attention_probabilities(&batch, &w, 0, 0);
        for head in probs {
            assert_eq!(head[(0, 0)], 1.0);
        }
        let counter = DispatchCounter::new();
        set_attention_layer(&batch, &w, 0, &counter).unwrap();
        assert_eq!(counter.total(), 1);
    }

    #[test]
    fn identical_tokens_produce_identical_outputs() {
        let w = BackboneWeights::seeded(2, &tiny_spec());
        let mut batch = random_batch(3, 1, 5, 8);
        let row = batch.features.slice(ndarray::s![0, 0, ..]).to_owned();
        let coord = batch.pe_coords.slice(ndarray::s![0, 0, ..]).to_owned();
        for k in 0..5 {
            batch.features.slice_mut(ndarray::s![0, k, ..]).assign(&row);
            batch.pe_coords.slice_mut(ndarray::s![0, k, ..]).assign(&coord);
        }
        let out = set_attention_layer(&batch, &w, 0, &DispatchCounter::new()).unwrap();
        let first = out.features.slice(ndarray::s![0, 0, ..]).to_owned();
        for k in 1..5 {
            assert_eq!(out.features.slice(ndarray::s![0, k, ..]), first.view());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let w = BackboneWeights::seeded(3, &tiny_spec());
        let batch = random_batch(4, 2, 7, 8);
        for set in 0..2 {
            for head in attention_probabilities(&batch, &w, 1, set) {
                for row in head.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zeroing_other_sets_never_changes_a_set() {
        let w = BackboneWeights::seeded(5, &tiny_spec());
        let batch = random_batch(6, 4, 5, 8);
        let base = set_attention_layer(&batch, &w, 0, &DispatchCounter::new()).unwrap();
        let mut poked = batch.clone();
        poked.features.slice_mut(ndarray::s![1.., .., ..]).fill(0.0);
        let out = set_attention_layer(&poked, &w, 0, &DispatchCounter::new()).unwrap();
        assert_eq!(
            base.features.slice(ndarray::s![0, .., ..]),
            out.features.slice(ndarray::s![0, .., ..])
        );
    }

    #[test]
    fn permuting_slots_permutes_outputs() {
        let w = BackboneWeights::seeded(6, &tiny_spec());
        let batch = random_batch(7, 1, 6, 8);
        let base = set_attention_layer(&batch, &w, 0, &DispatchCounter::new()).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut shuffled = batch.clone();
        for (dst, src) in perm.iter().enumerate() {
            shuffled
                .features
                .slice_mut(ndarray::s![0, dst, ..])
                .assign(&batch.features.slice(ndarray::s![0, *src, ..]));
            shuffled
                .pe_coords
                .slice_mut(ndarray::s![0, dst, ..])
                .assign(&batch.pe_coords.slice(ndarray::s![0, *src, ..]));
        }
        let out = set_attention_layer(&shuffled, &w, 0, &DispatchCounter::new()).unwrap();
        for (dst, src) in perm.iter().enumerate() {
            let a = out.features.slice(ndarray::s![0, dst, ..]);
            let b = base.features.slice(ndarray::s![0, *src, ..]);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn no_tensor_name_references_a_modality() {
        let w = BackboneWeights::seeded(7, &tiny_spec());
        for name in w.tensor_names() {
            for banned in ["lidar", "image", "camera"] {
                assert!(!name.contains(banned), "tensor `{name}` references a modality");
            }
        }
    }

    #[test]
    fn fused_dispatch_equals_separate_dispatches() {
        let w = BackboneWeights::seeded(8, &tiny_spec());
        let a = random_batch(9, 3, 4, 8);
        let b = random_batch(10, 2, 4, 8);
        let fused_counter = DispatchCounter::new();
        let (fa, fb) = batched_layer_over_modalities(&a, &b, &w, 0, &fused_counter).unwrap();
        assert_eq!(fused_counter.total(), 1);
        let serial_counter = DispatchCounter::new();
        let sa = set_attention_layer(&a, &w, 0, &serial_counter).unwrap();
        let sb = set_attention_layer(&b, &w, 0, &serial_counter).unwrap();
        assert_eq!(serial_counter.total(), 2);
        assert_eq!(fa.features, sa.features);
        assert_eq!(fb.features, sb.features);
    }

    #[test]
    fn empty_modality_degenerates_to_single_dispatch() {
        let w = BackboneWeights::seeded(11, &tiny_spec());
        let empty = SetBatch::empty(4, 8);
        let b = random_batch(12, 2, 4, 8);
        let counter = DispatchCounter::new();
        let (ea, eb) = batched_layer_over_modalities(&empty, &b, &w, 0, &counter).unwrap();
        assert_eq!(counter.total(), 1);
        assert_eq!(ea.num_sets(), 0);
        let direct = set_attention_layer(&b, &w, 0, &DispatchCounter::new()).unwrap();
        assert_eq!(eb.features, direct.features);
    }

    #[test]
    fn tau_mismatch_is_rejected() {
        let w = BackboneWeights::seeded(13, &tiny_spec());
        let a = random_batch(14, 1, 4, 8);
        let b = random_batch(15, 1, 5, 8);
        let err = batched_layer_over_modalities(&a, &b, &w, 0, &DispatchCounter::new());
        assert!(matches!(err, Err(Error::TauMismatch { left: 4, right: 5 })));
    }

    #[test]
    fn non_finite_inputs_are_reported() {
        let w = BackboneWeights::seeded(16, &tiny_spec());
        let mut batch = random_batch(17, 1, 3, 8);
        batch.features[(0, 0, 0)] = f32::INFINITY;
        let err = set_attention_layer(&batch, &w, 0, &DispatchCounter::new());
        assert!(matches!(err, Err(Error::NonFiniteActivation { layer: 0 })));
    }

    #[test]
    fn weights_roundtrip_through_container() {
        let w = BackboneWeights::seeded(42, &tiny_spec());
        let c = w.to_container();
        let back = BackboneWeights::from_container(&c).unwrap();
        assert_eq!(w, back);
        assert_eq!(c.to_bytes().unwrap(), back.to_container().to_bytes().unwrap());
    }

    #[test]
    fn zero_coordinates_take_the_bias_path() {
        let w = BackboneWeights::seeded(19, &tiny_spec());
        let pe = &w.layers[0].pos_mlp;
        let coords = Array3::<f32>::zeros((1, 2, 3));
        let got = positional_encode(coords.view(), pe);
        // Bias path computed by hand: fc2(tanh(fc1 bias)) + fc2 bias.
        let h: Vec<f64> =
            pe.fc1.bias.iter().map(|b| f64::from(*b).tanh()).collect();
        for out_i in 0..8 {
            let mut acc = f64::from(pe.fc2.bias[out_i]);
            for (j, hj) in h.iter().enumerate() {
                acc += f64::from(pe.fc2.weight[(j, out_i)]) * hj;
            }
            assert!((f64::from(got[(0, 0, out_i)]) - acc).abs() < 1e-6);
            assert_eq!(got[(0, 0, out_i)], got[(0, 1, out_i)]);
        }
    }
}
