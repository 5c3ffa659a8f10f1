//! The dynamic set partition engine.
//!
//! Sparse tokens are windowed, distributed into size-equivalent sets of
//! `tau` slots, ordered by X-major or Y-major inner-window rank, and moved
//! between token-major and set-major layouts by gather / canonical scatter.
//!
//! Partition construction is deterministic: identical inputs produce
//! byte-identical structures regardless of thread count, and canonical
//! slots are unique so scatters have no write conflicts.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which coordinate space a window partition lives in.
///
/// For the 2D space the third coordinate axis carries the camera view id
/// and the window depth is pinned to 1, so sets never span views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpaceTag {
    Lidar3d,
    Image2d,
}

/// Window shape in token-grid units plus its space tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub shape: [i64; 3],
    pub space: SpaceTag,
}

impl WindowSpec {
    pub fn new(shape: [i64; 3], space: SpaceTag) -> Self {
        assert!(shape.iter().all(|s| *s > 0), "window shape must be positive");
        if space == SpaceTag::Image2d {
            assert_eq!(shape[2], 1, "2D windows never span the view axis");
        }
        Self { shape, space }
    }
}

/// Inner-window ordering: lexicographic by (x, y, z) or (y, x, z).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SetOrder {
    XMajor,
    YMajor,
}

/// Window id of each token: component-wise floor division of its
/// coordinates by the window shape.
pub fn assign_windows(coords: &[[i64; 3]], spec: &WindowSpec) -> Vec<[i64; 3]> {
    coords
        .iter()
        .map(|c| {
            [
                c[0].div_euclid(spec.shape[0]),
                c[1].div_euclid(spec.shape[1]),
                c[2].div_euclid(spec.shape[2]),
            ]
        })
        .collect()
}

/// Global window enumeration order: row-major over (z, y, x), which for 2D
/// spaces keys by view first.
fn window_sort_key(w: [i64; 3]) -> (i64, i64, i64) {
    (w[2], w[1], w[0])
}

fn inner_sort_key(c: [i64; 3], order: SetOrder) -> (i64, i64, i64) {
    match order {
        SetOrder::XMajor => (c[0], c[1], c[2]),
        SetOrder::YMajor => (c[1], c[0], c[2]),
    }
}

/// Token indices sorted into contiguous per-window runs.
struct WindowRuns {
    /// Token indices ordered by (window, inner rank); ties on identical
    /// coordinates keep input order.
    sorted: Vec<u32>,
    /// `(start, end)` into `sorted` plus the window id, in window order.
    runs: Vec<(usize, usize, [i64; 3])>,
}

fn window_runs(coords: &[[i64; 3]], spec: &WindowSpec, order: SetOrder) -> WindowRuns {
    let windows = assign_windows(coords, spec);
    let mut sorted: Vec<u32> = (0..coords.len() as u32).collect();
    sorted.sort_by_key(|i| {
        let i = *i as usize;
        (window_sort_key(windows[i]), inner_sort_key(coords[i], order), i)
    });
    let mut runs = Vec::new();
    let mut start = 0usize;
    while start < sorted.len() {
        let w = windows[sorted[start] as usize];
        let mut end = start + 1;
        while end < sorted.len() && windows[sorted[end] as usize] == w {
            end += 1;
        }
        runs.push((start, end, w));
        start = end;
    }
    WindowRuns { sorted, runs }
}

/// Rank of each token inside its window under the given ordering;
/// ranks run 0..T-1 per window.
pub fn inner_window_order(
    coords: &[[i64; 3]],
    window_ids: &[[i64; 3]],
    order: SetOrder,
) -> Vec<u32> {
    debug_assert_eq!(coords.len(), window_ids.len());
    let mut sorted: Vec<u32> = (0..coords.len() as u32).collect();
    sorted.sort_by_key(|i| {
        let i = *i as usize;
        (window_sort_key(window_ids[i]), inner_sort_key(coords[i], order), i)
    });
    let mut ranks = vec![0u32; coords.len()];
    let mut rank = 0u32;
    for (pos, tok) in sorted.iter().enumerate() {
        if pos > 0 {
            let prev = sorted[pos - 1] as usize;
            rank = if window_ids[prev] == window_ids[*tok as usize] { rank + 1 } else { 0 };
        }
        ranks[*tok as usize] = rank;
    }
    ranks
}

/// Window-grouped, size-equivalent index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPartition {
    pub tau: usize,
    pub order: SetOrder,
    pub window_shape: [i64; 3],
    pub space: SpaceTag,
    pub num_tokens: usize,
    /// `num_sets x tau` global token indices.
    pub slots: Array2<u32>,
    /// Marks each token's unique write-back slot.
    pub canonical: Array2<bool>,
    /// Window id of each set.
    pub set_windows: Vec<[i64; 3]>,
}

/// Distribute each window's `T` tokens into `ceil(T / tau)` sets of exactly
/// `tau` slots. Slot `k` of a window's set `j` holds the token whose
/// inner-window rank is `floor((j*tau + k) * T / (S*tau))`; a token's
/// canonical slot is its first occurrence. Sets of all windows are
/// concatenated in window order.
pub fn dynamic_set_partition(
    coords: &[[i64; 3]],
    spec: &WindowSpec,
    tau: usize,
    order: SetOrder,
) -> SetPartition {
    assert!(tau >= 1, "tau must be at least 1");
    let rt = window_runs(coords, spec, order);

    let total_sets: usize = rt.runs.iter().map(|(s, e, _)| (e - s).div_ceil(tau)).sum();
    let mut slots = Array2::<u32>::zeros((total_sets, tau));
    let mut canonical = Array2::<bool>::from_elem((total_sets, tau), false);
    let mut set_windows = Vec::with_capacity(total_sets);

    let mut set_idx = 0usize;
    for (start, end, w) in &rt.runs {
        let by_rank = &rt.sorted[*start..*end];
        let t = by_rank.len() as u64;
        let s = by_rank.len().div_ceil(tau);
        let denom = (s * tau) as u64;
        let mut prev_rank = u64::MAX;
        for j in 0..s {
            for k in 0..tau {
                let rank = ((j * tau + k) as u64 * t) / denom;
                slots[(set_idx + j, k)] = by_rank[rank as usize];
                canonical[(set_idx + j, k)] = rank != prev_rank;
                prev_rank = rank;
            }
        }
        for _ in 0..s {
            set_windows.push(*w);
        }
        set_idx += s;
    }

    SetPartition {
        tau,
        order,
        window_shape: spec.shape,
        space: spec.space,
        num_tokens: coords.len(),
        slots,
        canonical,
        set_windows,
    }
}

impl SetPartition {
    pub fn num_sets(&self) -> usize {
        self.slots.nrows()
    }

    /// SHA-256 over the full structure; equal digests mean byte-identical
    /// partitions.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.tau as u64).to_le_bytes());
        h.update([match self.order {
            SetOrder::XMajor => 0u8,
            SetOrder::YMajor => 1u8,
        }]);
        for s in self.window_shape {
            h.update(s.to_le_bytes());
        }
        h.update((self.num_tokens as u64).to_le_bytes());
        for v in &self.slots {
            h.update(v.to_le_bytes());
        }
        for v in &self.canonical {
            h.update([u8::from(*v)]);
        }
        for w in &self.set_windows {
            for c in w {
                h.update(c.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Set coordinates normalized window-relative to [-1, 1] per axis, the
    /// form the positional encoder expects. Axes of extent 1 map to 0.
    pub fn normalized_coords(&self, coords: &[[i64; 3]]) -> Array3<f32> {
        let (s, tau) = (self.num_sets(), self.tau);
        let mut out = Array3::<f32>::zeros((s, tau, 3));
        for si in 0..s {
            let w = self.set_windows[si];
            for k in 0..tau {
                let c = coords[self.slots[(si, k)] as usize];
                for a in 0..3 {
                    let extent = self.window_shape[a];
                    if extent > 1 {
                        let rel = (c[a] - w[a] * extent) as f32;
                        out[(si, k, a)] = 2.0 * rel / (extent - 1) as f32 - 1.0;
                    }
                }
            }
        }
        out
    }

    pub fn stats(&self) -> PartitionStats {
        let slots = self.num_sets() * self.tau;
        let duplicates = slots - self.num_tokens_covered();
        let mut populations: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < self.num_sets() {
            let w = self.set_windows[i];
            let mut j = i;
            let mut canon = 0usize;
            while j < self.num_sets() && self.set_windows[j] == w {
                canon += self.canonical.row(j).iter().filter(|c| **c).count();
                j += 1;
            }
            populations.push(canon);
            i = j;
        }
        let mut histogram = std::collections::BTreeMap::new();
        for p in &populations {
            *histogram.entry(occupancy_bucket(*p)).or_insert(0usize) += 1;
        }
        PartitionStats {
            windows: populations.len(),
            sets: self.num_sets(),
            slots,
            tokens: self.num_tokens,
            duplicates,
            duplication_rate: if self.num_tokens == 0 {
                0.0
            } else {
                duplicates as f64 / self.num_tokens as f64
            },
            occupancy_histogram: histogram.into_iter().collect(),
        }
    }

    fn num_tokens_covered(&self) -> usize {
        self.canonical.iter().filter(|c| **c).count()
    }
}

fn occupancy_bucket(population: usize) -> usize {
    population.next_power_of_two()
}

/// Windows, sets, duplication rate, and a power-of-two histogram of window
/// populations; exported by the `stats` CLI subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionStats {
    pub windows: usize,
    pub sets: usize,
    pub slots: usize,
    pub tokens: usize,
    pub duplicates: usize,
    pub duplication_rate: f64,
    /// `(population rounded up to a power of two, window count)`.
    pub occupancy_histogram: Vec<(usize, usize)>,
}

/// Collect features and coordinates into set-major layout. Duplicated
/// slots copy the same row.
pub fn gather(
    partition: &SetPartition,
    features: ArrayView2<f32>,
    coords: &[[i64; 3]],
) -> Result<(Array3<f32>, Array3<i64>)> {
    if features.nrows() != partition.num_tokens || coords.len() != partition.num_tokens {
        return Err(Error::ShapeMismatch(format!(
            "partition built for {} tokens, given {} feature rows / {} coords",
            partition.num_tokens,
            features.nrows(),
            coords.len()
        )));
    }
    let c = features.ncols();
    let (s, tau) = (partition.num_sets(), partition.tau);
    let mut feat = Array3::<f32>::zeros((s, tau, c));
    let mut crd = Array3::<i64>::zeros((s, tau, 3));
    for si in 0..s {
        for k in 0..tau {
            let tok = partition.slots[(si, k)] as usize;
            if tok >= partition.num_tokens {
                return Err(Error::IndexOutOfRange { index: tok, len: partition.num_tokens });
            }
            feat.slice_mut(ndarray::s![si, k, ..]).assign(&features.row(tok));
            for a in 0..3 {
                crd[(si, k, a)] = coords[tok][a];
            }
        }
    }
    Ok((feat, crd))
}

/// Write each token's output row back from its canonical slot only;
/// non-canonical duplicate outputs are discarded.
pub fn scatter_canonical(
    partition: &SetPartition,
    set_outputs: ArrayView3<f32>,
) -> Result<Array2<f32>> {
    scatter_canonical_filtered(partition, set_outputs, |_| true)
}

/// Canonical scatter restricted to tokens accepted by `keep`; rejected
/// tokens get zero rows. The serial dispatch path uses this to write one
/// modality at a time.
pub fn scatter_canonical_filtered(
    partition: &SetPartition,
    set_outputs: ArrayView3<f32>,
    keep: impl Fn(usize) -> bool,
) -> Result<Array2<f32>> {
    let (s, tau, c) = set_outputs.dim();
    if s != partition.num_sets() || tau != partition.tau {
        return Err(Error::ShapeMismatch(format!(
            "set outputs {s}x{tau} do not match partition {}x{}",
            partition.num_sets(),
            partition.tau
        )));
    }
    let mut out = Array2::<f32>::zeros((partition.num_tokens, c));
    for si in 0..s {
        for k in 0..tau {
            if partition.canonical[(si, k)] {
                let tok = partition.slots[(si, k)] as usize;
                if keep(tok) {
                    out.row_mut(tok).assign(&set_outputs.slice(ndarray::s![si, k, ..]));
                }
            }
        }
    }
    Ok(out)
}
