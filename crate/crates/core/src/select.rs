//! Histogram cross-entropy feature selection.
//!
//! For every location `(i, j, k)` of a feature tensor the `N` per-image
//! values are histogrammed into `B` equal-width bins over their observed
//! range; each bin votes for its majority class, per-class probabilities are
//! the fraction of bins won, and the location's cross-entropy sums
//! `log(1/p_class(n))` over samples. Lower entropy means more discriminant.

use rayon::prelude::*;

use crate::error::{Result, SaakError};
use crate::tensor::Tensor;
use crate::transform::FeatureTensor;

/// Probability clamp keeping the entropy finite when a class wins no bin.
pub const PROB_EPSILON: f64 = 1e-8;

/// Per-location cross-entropy values for one stage.
#[derive(Debug, Clone)]
pub struct EntropyMap {
    /// Rank-3 tensor `D1 x D2 x K`.
    pub values: Tensor,
    pub bins: usize,
    pub class_count: usize,
}

impl EntropyMap {
    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.values.dims()[0], self.values.dims()[1])
    }

    pub fn spectral_dim(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let dims = self.values.dims();
        self.values.data()[(i * dims[1] + j) * dims[2] + k] as f64
    }
}

/// Compute the cross-entropy map of one stage's features.
pub fn entropy_map(
    features: &FeatureTensor,
    labels: &[usize],
    class_count: usize,
    bins: usize,
) -> Result<EntropyMap> {
    let dims = features.data.dims();
    let (n, d1, d2, k) = (dims[0], dims[1], dims[2], dims[3]);
    if class_count < 2 {
        return Err(SaakError::Domain(format!(
            "cross-entropy needs at least 2 classes, got {}",
            class_count
        )));
    }
    if n < class_count {
        return Err(SaakError::Domain(format!(
            "need at least as many samples ({}) as classes ({})",
            n, class_count
        )));
    }
    if labels.len() != n {
        return Err(SaakError::Domain(format!(
            "{} labels for {} images",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(SaakError::Domain(format!(
            "label {} out of range for {} classes",
            bad, class_count
        )));
    }
    if bins == 0 {
        return Err(SaakError::Domain("bin count must be >= 1".into()));
    }

    let locations = d1 * d2 * k;
    let img_stride = d1 * d2 * k;
    let mut out = vec![0.0f32; locations];
    let src = features.data.data();
    out.par_iter_mut().enumerate().for_each(|(loc, h_out)| {
        let mut values = Vec::with_capacity(n);
        for img in 0..n {
            values.push(src[img * img_stride + loc]);
        }
        *h_out = location_entropy(&values, labels, class_count, bins) as f32;
    });
    Ok(EntropyMap {
        values: Tensor::new(vec![d1, d2, k], out)?,
        bins,
        class_count,
    })
}

/// Cross-entropy of a single location. Constant values yield the
/// never-selected sentinel `N * log(1/epsilon)`.
fn location_entropy(values: &[f32], labels: &[usize], class_count: usize, bins: usize) -> f64 {
    let n = values.len();
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min == max {
        return n as f64 * (1.0 / PROB_EPSILON).ln();
    }
    let range = (max - min) as f64;
    let mut counts = vec![0usize; bins * class_count];
    for (&v, &label) in values.iter().zip(labels) {
        let mut bin = (((v - min) as f64 / range) * bins as f64) as usize;
        if bin >= bins {
            bin = bins - 1; // max edge inclusive
        }
        counts[bin * class_count + label] += 1;
    }
    // bins won per class: each bin votes for its majority class
    // (ties -> lowest class index, empty bins vote for no one)
    let mut wins = vec![0usize; class_count];
    for b in 0..bins {
        let row = &counts[b * class_count..(b + 1) * class_count];
        let mut best = 0;
        for (c, &cnt) in row.iter().enumerate() {
            if cnt > row[best] {
                best = c;
            }
        }
        if row[best] > 0 {
            wins[best] += 1;
        }
    }
    let probs: Vec<f64> = wins
        .iter()
        .map(|&w| (w as f64 / bins as f64).max(PROB_EPSILON))
        .collect();
    let mut h = 0.0f64;
    for &label in labels {
        h += (1.0 / probs[label]).ln();
    }
    h
}

/// Retained spectral channels and per-channel retained spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub dims: (usize, usize, usize),
    /// Sorted ascending channel indices.
    pub spectral_keep: Vec<usize>,
    /// Per retained channel (parallel to `spectral_keep`), positions sorted
    /// row-major.
    pub spatial_keep: Vec<Vec<(usize, usize)>>,
}

impl SelectionMask {
    pub fn packed_len(&self) -> usize {
        self.spatial_keep.iter().map(|p| p.len()).sum()
    }
}

/// Channels with the lowest spatially averaged entropy (ties: lower index),
/// returned sorted ascending by channel index.
pub fn rank_spectral(map: &EntropyMap, keep: usize) -> Result<Vec<usize>> {
    let k = map.spectral_dim();
    if keep < 1 || keep > k {
        return Err(SaakError::Config(format!(
            "spectral keep count {} outside [1, {}]",
            keep, k
        )));
    }
    let (d1, d2) = map.spatial_dims();
    let mut means: Vec<(f64, usize)> = (0..k)
        .map(|ch| {
            let mut sum = 0.0f64;
            for i in 0..d1 {
                for j in 0..d2 {
                    sum += map.get(i, j, ch);
                }
            }
            (sum / (d1 * d2) as f64, ch)
        })
        .collect();
    means.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = means[..keep].iter().map(|&(_, ch)| ch).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Lowest-entropy positions of one channel (ties: row-major order), returned
/// sorted row-major.
pub fn rank_spatial(map: &EntropyMap, channel: usize, keep: usize) -> Result<Vec<(usize, usize)>> {
    let (d1, d2) = map.spatial_dims();
    if keep < 1 || keep > d1 * d2 {
        return Err(SaakError::Config(format!(
            "spatial keep count {} outside [1, {}]",
            keep,
            d1 * d2
        )));
    }
    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(d1 * d2);
    for i in 0..d1 {
        for j in 0..d2 {
            cells.push((map.get(i, j, channel), i, j));
        }
    }
    cells.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut kept: Vec<(usize, usize)> = cells[..keep].iter().map(|&(_, i, j)| (i, j)).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Build a full mask: spectral ranking, then spatial ranking per retained
/// channel with a common per-channel budget.
pub fn build_mask(
    map: &EntropyMap,
    spectral_keep: usize,
    spatial_keep: usize,
) -> Result<SelectionMask> {
    let channels = rank_spectral(map, spectral_keep)?;
    let spatial = channels
        .iter()
        .map(|&ch| rank_spatial(map, ch, spatial_keep))
        .collect::<Result<Vec<_>>>()?;
    let (d1, d2) = map.spatial_dims();
    Ok(SelectionMask {
        dims: (d1, d2, map.spectral_dim()),
        spectral_keep: channels,
        spatial_keep: spatial,
    })
}

/// Budget count from a fraction of a total (clamped to `[1, total]`).
pub fn fraction_to_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).round() as usize).clamp(1, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Unretained locations set to zero, shape preserved.
    ZeroedTensor,
    /// Retained values concatenated (channel-ascending, row-major) per image.
    PackedVector,
}

#[derive(Debug, Clone)]
pub enum Selected {
    Tensor(Tensor),
    /// `N x F` row-major matrix of packed vectors.
    Packed { rows: usize, cols: usize, data: Vec<f32> },
}

pub fn apply_selection(
    features: &FeatureTensor,
    mask: &SelectionMask,
    mode: SelectionMode,
) -> Result<Selected> {
    let dims = features.data.dims();
    if (dims[1], dims[2], dims[3]) != mask.dims {
        return Err(SaakError::Domain(format!(
            "mask dims {:?} inconsistent with features {:?}",
            mask.dims, dims
        )));
    }
    for (&ch, positions) in mask.spectral_keep.iter().zip(&mask.spatial_keep) {
        if ch >= dims[3] {
            return Err(SaakError::Domain(format!("mask channel {} out of range", ch)));
        }
        if let Some(&(i, j)) = positions.iter().find(|&&(i, j)| i >= dims[1] || j >= dims[2]) {
            return Err(SaakError::Domain(format!(
                "mask position ({}, {}) out of range",
                i, j
            )));
        }
    }
    let n = dims[0];
    match mode {
        SelectionMode::ZeroedTensor => {
            let mut out = Tensor::zeros(dims.to_vec());
            for img in 0..n {
                for (&ch, positions) in mask.spectral_keep.iter().zip(&mask.spatial_keep) {
                    for &(i, j) in positions {
                        out.set4(img, i, j, ch, features.data.get4(img, i, j, ch));
                    }
                }
            }
            Ok(Selected::Tensor(out))
        }
        SelectionMode::PackedVector => {
            let cols = mask.packed_len();
            let mut data = Vec::with_capacity(n * cols);
            for img in 0..n {
                for (&ch, positions) in mask.spectral_keep.iter().zip(&mask.spatial_keep) {
                    for &(i, j) in positions {
                        data.push(features.data.get4(img, i, j, ch));
                    }
                }
            }
            Ok(Selected::Packed { rows: n, cols, data })
        }
    }
}

const MASK_HEADER: &str = "saak-mask v1";

pub fn save_mask(path: &std::path::Path, mask: &SelectionMask) -> Result<()> {
    let mut text = String::new();
    text.push_str(MASK_HEADER);
    text.push('\n');
    text.push_str(&format!(
        "dims = {} {} {}\n",
        mask.dims.0, mask.dims.1, mask.dims.2
    ));
    for (&ch, positions) in mask.spectral_keep.iter().zip(&mask.spatial_keep) {
        let cells: Vec<String> = positions.iter().map(|(i, j)| format!("{},{}", i, j)).collect();
        text.push_str(&format!("channel {} = {}\n", ch, cells.join(" ")));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_mask(path: &std::path::Path) -> Result<SelectionMask> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MASK_HEADER) {
        return Err(SaakError::Format(format!(
            "{}: missing '{}' header",
            path.display(),
            MASK_HEADER
        )));
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| SaakError::Format(format!("{}: missing dims line", path.display())))?;
    let dims_str = dims_line
        .strip_prefix("dims = ")
        .ok_or_else(|| SaakError::Format(format!("{}: bad dims line", path.display())))?;
    let parts: Vec<usize> = dims_str
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| SaakError::Format(format!("{}: bad dims value '{}'", path.display(), s)))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(SaakError::Format(format!(
            "{}: dims line needs 3 values",
            path.display()
        )));
    }
    let mut spectral_keep = Vec::new();
    let mut spatial_keep = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("channel ")
            .ok_or_else(|| SaakError::Format(format!("{}: bad line '{}'", path.display(), line)))?;
        let (ch, cells) = rest
            .split_once(" = ")
            .ok_or_else(|| SaakError::Format(format!("{}: bad line '{}'", path.display(), line)))?;
        spectral_keep.push(ch.parse().map_err(|_| {
            SaakError::Format(format!("{}: bad channel index '{}'", path.display(), ch))
        })?);
        let mut positions = Vec::new();
        for cell in cells.split_whitespace() {
            let (i, j) = cell.split_once(',').ok_or_else(|| {
                SaakError::Format(format!("{}: bad position '{}'", path.display(), cell))
            })?;
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| {
                    SaakError::Format(format!("{}: bad position '{}'", path.display(), cell))
                })
            };
            positions.push((parse(i)?, parse(j)?));
        }
        spatial_keep.push(positions);
    }
    Ok(SelectionMask {
        dims: (parts[0], parts[1], parts[2]),
        spectral_keep,
        spatial_keep,
    })
}
