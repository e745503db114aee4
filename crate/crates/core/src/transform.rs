//! Forward and inverse Saak stages: patch extraction, projection with
//! sign-to-position conversion, max-pooling, and stage cascades.

use rayon::prelude::*;

use crate::error::{Result, SaakError};
use crate::kernel::{PatchMatrix, Pooling, SaakKernelSet, StageConfig};
use crate::tensor::Tensor;

/// Saak coefficients of one stage: rank-4 `N x D1 x D2 x K`, channel 0 is DC.
/// Values are non-negative by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Tensor,
    pub stage: usize,
}

impl FeatureTensor {
    pub fn from_images(data: Tensor) -> Self {
        FeatureTensor { data, stage: 0 }
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.data.dims()[1], self.data.dims()[2])
    }

    pub fn spectral_dim(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn image_count(&self) -> usize {
        self.data.dims()[0]
    }
}

/// An ordered chain of fitted stages.
#[derive(Debug, Clone)]
pub struct SaakCascade {
    pub stages: Vec<(StageConfig, SaakKernelSet)>,
}

/// Number of valid windows along one axis.
pub fn window_count(dim: usize, k_s: usize, stride: usize) -> usize {
    (dim - k_s) / stride + 1
}

/// Extract all valid (no padding) windows from every image.
///
/// Rows are ordered image-major, then window row-major; within a row the
/// patch is flattened spatial row-major with channel innermost.
pub fn extract_patches(t: &Tensor, k_s: usize, stride: usize) -> Result<PatchMatrix> {
    if t.rank() != 4 {
        return Err(SaakError::Domain("patch extraction needs a rank-4 tensor".into()));
    }
    let (n, d1, d2, k) = (t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]);
    if d1 < k_s || d2 < k_s {
        return Err(SaakError::Domain(format!(
            "spatial dims {}x{} smaller than kernel size {}",
            d1, d2, k_s
        )));
    }
    let g1 = window_count(d1, k_s, stride);
    let g2 = window_count(d2, k_s, stride);
    let cols = k_s * k_s * k;
    let rows = n * g1 * g2;
    let mut data = vec![0.0f32; rows * cols];
    let img_stride = d1 * d2 * k;
    let patches_per_img = g1 * g2;
    data.par_chunks_mut(patches_per_img * cols)
        .enumerate()
        .for_each(|(img, out)| {
            let src = &t.data()[img * img_stride..(img + 1) * img_stride];
            let mut o = 0;
            for wi in 0..g1 {
                for wj in 0..g2 {
                    let (y0, x0) = (wi * stride, wj * stride);
                    for dy in 0..k_s {
                        let start = ((y0 + dy) * d2 + x0) * k;
                        out[o..o + k_s * k].copy_from_slice(&src[start..start + k_s * k]);
                        o += k_s * k;
                    }
                }
            }
        });
    Ok(PatchMatrix { rows, cols, data })
}

/// Apply one Saak stage: project onto DC + AC kernels, sign-to-position
/// convert the AC coefficients, then optionally max-pool.
pub fn forward_stage(
    input: &FeatureTensor,
    kernels: &SaakKernelSet,
    cfg: &StageConfig,
) -> Result<FeatureTensor> {
    cfg.validate()?;
    let t = &input.data;
    let (n, d1, d2, k_in) = (t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]);
    let k_s = cfg.kernel_size;
    if d1 < k_s || d2 < k_s {
        return Err(SaakError::Domain(format!(
            "spatial dims {}x{} smaller than kernel size {}",
            d1, d2, k_s
        )));
    }
    let n_in = k_s * k_s * k_in;
    if kernels.input_dim != n_in {
        return Err(SaakError::Domain(format!(
            "kernel input dim {} does not match patch dim {} (k_s={} K_in={})",
            kernels.input_dim, n_in, k_s, k_in
        )));
    }
    let g1 = window_count(d1, k_s, cfg.stride);
    let g2 = window_count(d2, k_s, cfg.stride);
    let k_out = kernels.augmented_count();
    // pooling is fused into the projection loop so the pre-pool tensor is
    // never allocated (it dominates memory on large image sets)
    let (o1, o2) = match cfg.pool {
        Pooling::None => (g1, g2),
        Pooling::Max2 => (g1 / 2, g2 / 2),
    };
    if o1 == 0 || o2 == 0 {
        return Err(SaakError::Domain(format!(
            "pooling the {}x{} window grid empties the spatial extent",
            g1, g2
        )));
    }
    let mut out = Tensor::zeros(vec![n, o1, o2, k_out]);
    let img_in = d1 * d2 * k_in;
    let img_out = o1 * o2 * k_out;
    let dc0 = kernels.dc[0]; // all components equal
    out.data_mut()
        .par_chunks_mut(img_out)
        .enumerate()
        .for_each(|(img, dst)| {
            let src = &t.data()[img * img_in..(img + 1) * img_in];
            let mut patch = vec![0.0f32; n_in];
            let mut cell = vec![0.0f32; k_out];
            for wi in 0..g1 {
                for wj in 0..g2 {
                    if cfg.pool == Pooling::Max2 && (wi >= 2 * o1 || wj >= 2 * o2) {
                        continue; // trailing row/column dropped (floor)
                    }
                    let (y0, x0) = (wi * cfg.stride, wj * cfg.stride);
                    let mut o = 0;
                    for dy in 0..k_s {
                        let start = ((y0 + dy) * d2 + x0) * k_in;
                        patch[o..o + k_s * k_in]
                            .copy_from_slice(&src[start..start + k_s * k_in]);
                        o += k_s * k_in;
                    }
                    let sum: f32 = patch.iter().sum();
                    let p0 = dc0 * sum;
                    let mean = sum / n_in as f32;
                    for v in patch.iter_mut() {
                        *v -= mean;
                    }
                    cell[0] = p0;
                    for (kk, b) in kernels.ac_basis.iter().enumerate() {
                        let p = dot_f32(b, &patch);
                        if p >= 0.0 {
                            cell[2 * kk + 1] = p;
                            cell[2 * kk + 2] = 0.0;
                        } else {
                            cell[2 * kk + 1] = 0.0;
                            cell[2 * kk + 2] = -p;
                        }
                    }
                    match cfg.pool {
                        Pooling::None => {
                            dst[(wi * o2 + wj) * k_out..(wi * o2 + wj + 1) * k_out]
                                .copy_from_slice(&cell);
                        }
                        Pooling::Max2 => {
                            let target = &mut dst
                                [((wi / 2) * o2 + wj / 2) * k_out..((wi / 2) * o2 + wj / 2 + 1) * k_out];
                            if wi % 2 == 0 && wj % 2 == 0 {
                                target.copy_from_slice(&cell);
                            } else {
                                for (t, &v) in target.iter_mut().zip(&cell) {
                                    if v > *t {
                                        *t = v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(FeatureTensor {
        data: out,
        stage: input.stage + 1,
    })
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[4 * i..4 * i + 4], &b[4 * i..4 * i + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Per-channel spatial max over non-overlapping windows; trailing odd
/// rows/columns are dropped (floor semantics).
pub fn max_pool(t: &FeatureTensor, window: usize, stride: usize) -> Result<FeatureTensor> {
    let (n, d1, d2, k) = (
        t.data.dims()[0],
        t.data.dims()[1],
        t.data.dims()[2],
        t.data.dims()[3],
    );
    if d1 < window || d2 < window {
        return Err(SaakError::Domain(format!(
            "spatial dims {}x{} smaller than pooling window {}",
            d1, d2, window
        )));
    }
    let o1 = (d1 - window) / stride + 1;
    let o2 = (d2 - window) / stride + 1;
    // non-overlapping floor semantics for the standard 2/2 case
    let (o1, o2) = if window == stride {
        (d1 / stride, d2 / stride)
    } else {
        (o1, o2)
    };
    let mut out = Tensor::zeros(vec![n, o1, o2, k]);
    let img_in = d1 * d2 * k;
    let img_out = o1 * o2 * k;
    out.data_mut()
        .par_chunks_mut(img_out)
        .enumerate()
        .for_each(|(img, dst)| {
            let src = &t.data.data()[img * img_in..(img + 1) * img_in];
            for oi in 0..o1 {
                for oj in 0..o2 {
                    let cell = &mut dst[(oi * o2 + oj) * k..(oi * o2 + oj + 1) * k];
                    for dy in 0..window {
                        for dx in 0..window {
                            let y = oi * stride + dy;
                            let x = oj * stride + dx;
                            let s = &src[(y * d2 + x) * k..(y * d2 + x + 1) * k];
                            if dy == 0 && dx == 0 {
                                cell.copy_from_slice(s);
                            } else {
                                for (c, &v) in cell.iter_mut().zip(s) {
                                    if v > *c {
                                        *c = v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(FeatureTensor {
        data: out,
        stage: t.stage,
    })
}

/// Run every stage of the cascade, returning each stage's output (after its
/// pooling step) for per-stage feature selection.
pub fn forward_cascade(images: &Tensor, cascade: &SaakCascade) -> Result<Vec<FeatureTensor>> {
    let mut current = FeatureTensor::from_images(images.clone());
    let mut outputs = Vec::with_capacity(cascade.stages.len());
    for (idx, (cfg, kernels)) in cascade.stages.iter().enumerate() {
        let (d1, d2) = current.spatial_dims();
        if d1 < cfg.kernel_size || d2 < cfg.kernel_size {
            return Err(SaakError::Config(format!(
                "stage {}: spatial dims {}x{} smaller than kernel size {}",
                idx + 1,
                d1,
                d2,
                cfg.kernel_size
            )));
        }
        let next = forward_stage(&current, kernels, cfg).map_err(|e| match e {
            SaakError::Domain(m) => SaakError::Config(format!("stage {}: {}", idx + 1, m)),
            other => other,
        })?;
        outputs.push(next.clone());
        current = next;
    }
    Ok(outputs)
}

/// Invert one lossless stage (non-overlapping, keep-all, no pooling):
/// position-to-sign conversion followed by basis reconstruction and re-tiling.
pub fn inverse_stage(
    t: &FeatureTensor,
    kernels: &SaakKernelSet,
    cfg: &StageConfig,
) -> Result<FeatureTensor> {
    if cfg.stride != cfg.kernel_size
        || cfg.pool != Pooling::None
        || kernels.retained() != kernels.input_dim - 1
    {
        return Err(SaakError::Config(
            "inverse is only defined for non-overlapping keep-all stages without pooling".into(),
        ));
    }
    let k_s = cfg.kernel_size;
    let (n, g1, g2, k_aug) = (
        t.data.dims()[0],
        t.data.dims()[1],
        t.data.dims()[2],
        t.data.dims()[3],
    );
    if k_aug != kernels.augmented_count() {
        return Err(SaakError::Domain(format!(
            "feature spectral dim {} does not match augmented kernel count {}",
            k_aug,
            kernels.augmented_count()
        )));
    }
    let k_in = kernels.input_dim / (k_s * k_s);
    let (d1, d2) = (g1 * k_s, g2 * k_s);
    let mut out = Tensor::zeros(vec![n, d1, d2, k_in]);
    let img_in = g1 * g2 * k_aug;
    let img_out = d1 * d2 * k_in;
    let n_in = kernels.input_dim;
    out.data_mut()
        .par_chunks_mut(img_out)
        .enumerate()
        .for_each(|(img, dst)| {
            let src = &t.data.data()[img * img_in..(img + 1) * img_in];
            let mut patch = vec![0.0f32; n_in];
            for wi in 0..g1 {
                for wj in 0..g2 {
                    let cell = &src[(wi * g2 + wj) * k_aug..(wi * g2 + wj + 1) * k_aug];
                    let p0 = cell[0];
                    for (v, &a) in patch.iter_mut().zip(&kernels.dc) {
                        *v = a * p0;
                    }
                    for (kk, b) in kernels.ac_basis.iter().enumerate() {
                        let p = cell[2 * kk + 1] - cell[2 * kk + 2];
                        if p != 0.0 {
                            for (v, &bi) in patch.iter_mut().zip(b) {
                                *v += bi * p;
                            }
                        }
                    }
                    let (y0, x0) = (wi * k_s, wj * k_s);
                    let mut o = 0;
                    for dy in 0..k_s {
                        let start = ((y0 + dy) * d2 + x0) * k_in;
                        dst[start..start + k_s * k_in]
                            .copy_from_slice(&patch[o..o + k_s * k_in]);
                        o += k_s * k_in;
                    }
                }
            }
        });
    Ok(FeatureTensor {
        data: out,
        stage: t.stage.saturating_sub(1),
    })
}

/// Per-spectral-channel RMSE between clean and attacked coefficients.
#[derive(Debug, Clone)]
pub struct RmseCurve {
    /// One value per spectral channel.
    pub values: Vec<f64>,
    /// True where the normalized variant divided by a zero clean RMS
    /// (reported as 0).
    pub degenerate: Vec<bool>,
}

pub fn rmse_per_spectral(
    clean: &FeatureTensor,
    attacked: &FeatureTensor,
    normalize: bool,
) -> Result<RmseCurve> {
    if clean.data.dims() != attacked.data.dims() {
        return Err(SaakError::Domain(format!(
            "feature dims mismatch: {:?} vs {:?}",
            clean.data.dims(),
            attacked.data.dims()
        )));
    }
    let k = clean.spectral_dim();
    let cells = clean.data.len() / k;
    let mut sq = vec![0.0f64; k];
    let mut clean_sq = vec![0.0f64; k];
    for (c_cell, a_cell) in clean
        .data
        .data()
        .chunks_exact(k)
        .zip(attacked.data.data().chunks_exact(k))
    {
        for ch in 0..k {
            let d = c_cell[ch] as f64 - a_cell[ch] as f64;
            sq[ch] += d * d;
            clean_sq[ch] += (c_cell[ch] as f64).powi(2);
        }
    }
    let mut values = Vec::with_capacity(k);
    let mut degenerate = vec![false; k];
    for ch in 0..k {
        let rmse = (sq[ch] / cells as f64).sqrt();
        if normalize {
            let rms = (clean_sq[ch] / cells as f64).sqrt();
            if rms == 0.0 {
                degenerate[ch] = true;
                values.push(0.0);
            } else {
                values.push(rmse / rms);
            }
        } else {
            values.push(rmse);
        }
    }
    Ok(RmseCurve { values, degenerate })
}
