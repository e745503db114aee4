//! One stage of Saak kernel fitting: DC vector, DC removal, patch correlation,
//! eigendecomposition, truncation, and kernel persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Result, SaakError};
use crate::linalg::{self, MatF64};
use crate::tensor::Tensor;
use crate::transform;

/// How many AC eigenvectors a stage retains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Retain all `N_in - 1` AC components (lossless).
    KeepAll,
    /// Retain `K - 1` AC components so the stage keeps `K` directions
    /// including DC. `1 <= K <= N_in`.
    TopK(usize),
    /// Retain the smallest prefix of the spectrum whose cumulative energy
    /// reaches the fraction, with a floor of [`ENERGY_FLOOR`] components.
    Energy(f64),
}

/// Minimum AC components kept under energy truncation (capped by `N_in - 1`).
pub const ENERGY_FLOOR: usize = 3;

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::KeepAll => write!(f, "keep-all"),
            Truncation::TopK(k) => write!(f, "top:{}", k),
            Truncation::Energy(t) => write!(f, "energy:{}", t),
        }
    }
}

impl FromStr for Truncation {
    type Err = SaakError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "keep-all" {
            return Ok(Truncation::KeepAll);
        }
        if let Some(k) = s.strip_prefix("top:") {
            let k: usize = k
                .parse()
                .map_err(|_| SaakError::Config(format!("bad top-K truncation '{}'", s)))?;
            return Ok(Truncation::TopK(k));
        }
        if let Some(t) = s.strip_prefix("energy:") {
            let t: f64 = t
                .parse()
                .map_err(|_| SaakError::Config(format!("bad energy truncation '{}'", s)))?;
            return Ok(Truncation::Energy(t));
        }
        Err(SaakError::Config(format!(
            "unknown truncation '{}' (expected keep-all, top:K or energy:TAU)",
            s
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    None,
    /// 2x2 max-pool with stride 2 (floor on odd dims).
    Max2,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::None => write!(f, "none"),
            Pooling::Max2 => write!(f, "max2"),
        }
    }
}

impl FromStr for Pooling {
    type Err = SaakError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Pooling::None),
            "max2" => Ok(Pooling::Max2),
            _ => Err(SaakError::Config(format!(
                "unknown pooling '{}' (expected none or max2)",
                s
            ))),
        }
    }
}

/// Configuration of one Saak stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    /// Spatial window side, one of {2, 3, 5}.
    pub kernel_size: usize,
    /// 1 (overlapping) or `kernel_size` (non-overlapping).
    pub stride: usize,
    pub pool: Pooling,
    pub truncation: Truncation,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 3, 5].contains(&self.kernel_size) {
            return Err(SaakError::Config(format!(
                "kernel size {} not in {{2, 3, 5}}",
                self.kernel_size
            )));
        }
        if self.stride != 1 && self.stride != self.kernel_size {
            return Err(SaakError::Config(format!(
                "stride {} must be 1 or the kernel size {}",
                self.stride, self.kernel_size
            )));
        }
        if let Truncation::Energy(t) = self.truncation {
            if !(t > 0.0 && t <= 1.0) {
                return Err(SaakError::Config(format!(
                    "energy fraction {} outside (0, 1]",
                    t
                )));
            }
        }
        Ok(())
    }
}

/// Flattened patches: `rows` patches of `cols` values each
/// (spatial row-major, channel innermost).
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PatchMatrix {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Fitted kernels of one stage: DC vector plus retained AC eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct SaakKernelSet {
    pub input_dim: usize,
    /// `(1/sqrt(N_in)) * (1, ..., 1)`.
    pub dc: Vec<f32>,
    /// Retained orthonormal AC eigenvectors, by non-increasing eigenvalue.
    pub ac_basis: Vec<Vec<f32>>,
    /// Eigenvalues of the retained components, clamped at 0.
    pub eigenvalues: Vec<f64>,
}

impl SaakKernelSet {
    /// Spectral dimension after sign-to-position augmentation: `2K - 1`
    /// where `K` counts DC plus retained AC components.
    pub fn augmented_count(&self) -> usize {
        2 * (self.ac_basis.len() + 1) - 1
    }

    pub fn retained(&self) -> usize {
        self.ac_basis.len()
    }
}

/// Unit DC vector of the given dimension.
pub fn dc_vector(n: usize) -> Result<Vec<f32>> {
    if n == 0 {
        return Err(SaakError::Domain("dc vector dimension must be >= 1".into()));
    }
    let v = 1.0 / (n as f64).sqrt();
    Ok(vec![v as f32; n])
}

/// Subtract the DC component: `f = f~ - a0 (a0^T f~)`.
pub fn remove_dc(patch: &[f32]) -> Result<Vec<f32>> {
    if patch.is_empty() {
        return Err(SaakError::Domain("patch must have length >= 1".into()));
    }
    let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / patch.len() as f64;
    Ok(patch.iter().map(|&v| (v as f64 - mean) as f32).collect())
}

const CORR_BLOCK_ROWS: usize = 8192;

/// Patch correlation matrix `R = (1/M) sum f f^T` over DC-removed rows.
///
/// Accumulation is in `f64` over fixed row blocks summed in block order, so
/// the result does not depend on the worker count.
/// Add each patch's upper-triangle outer product into `total` (block-ordered
/// parallel reduction, deterministic for any worker count).
fn correlation_accumulate(patches: &PatchMatrix, total: &mut [f64]) {
    let n = patches.cols;
    let tri = n * (n + 1) / 2;
    let blocks: Vec<Vec<f64>> = patches
        .data
        .par_chunks(CORR_BLOCK_ROWS * n)
        .map(|chunk| {
            let mut acc = vec![0.0f64; tri];
            for row in chunk.chunks_exact(n) {
                let mut t = 0;
                for i in 0..n {
                    let fi = row[i] as f64;
                    for &fj in &row[i..] {
                        acc[t] += fi * fj as f64;
                        t += 1;
                    }
                }
            }
            acc
        })
        .collect();
    for block in &blocks {
        for (t, v) in total.iter_mut().zip(block) {
            *t += v;
        }
    }
}

pub fn correlation_matrix(patches: &PatchMatrix) -> Result<MatF64> {
    let (m, n) = (patches.rows, patches.cols);
    if m == 0 {
        return Err(SaakError::Domain(
            "correlation matrix needs at least one patch".into(),
        ));
    }
    let mut total = vec![0.0f64; n * (n + 1) / 2];
    correlation_accumulate(patches, &mut total);
    let mut r = MatF64::zeros(n, n);
    let mut t = 0;
    for i in 0..n {
        for j in i..n {
            let v = total[t] / m as f64;
            r.set(i, j, v);
            r.set(j, i, v);
            t += 1;
        }
    }
    Ok(r)
}

/// Upper bound on the f32 elements a streamed patch block may hold (~64 MB).
const FIT_BLOCK_ELEMS: usize = 16 * 1024 * 1024;

/// Fit one stage of Saak kernels from a rank-4 feature tensor.
///
/// Patches are extracted and their correlation accumulated in image blocks so
/// the full patch matrix is never materialized; block order is fixed, keeping
/// the sums deterministic.
pub fn fit_stage_kernels(features: &Tensor, cfg: &StageConfig) -> Result<SaakKernelSet> {
    cfg.validate()?;
    if features.rank() != 4 || features.dims()[0] == 0 {
        return Err(SaakError::Domain(
            "kernel fitting needs a non-empty rank-4 tensor".into(),
        ));
    }
    let dims = features.dims();
    let (imgs, d1, d2, k_in) = (dims[0], dims[1], dims[2], dims[3]);
    if d1 < cfg.kernel_size || d2 < cfg.kernel_size {
        return Err(SaakError::Domain(format!(
            "spatial dims {}x{} smaller than kernel size {}",
            d1, d2, cfg.kernel_size
        )));
    }
    let n = cfg.kernel_size * cfg.kernel_size * k_in;
    let windows = transform::window_count(d1, cfg.kernel_size, cfg.stride)
        * transform::window_count(d2, cfg.kernel_size, cfg.stride);
    let block = (FIT_BLOCK_ELEMS / (windows * n).max(1)).clamp(1, imgs);

    let mut total = vec![0.0f64; n * (n + 1) / 2];
    let mut rows = 0usize;
    let img_elems = d1 * d2 * k_in;
    for start in (0..imgs).step_by(block) {
        let count = block.min(imgs - start);
        let sub = Tensor::new(
            vec![count, d1, d2, k_in],
            features.data()[start * img_elems..(start + count) * img_elems].to_vec(),
        )?;
        let mut patches = transform::extract_patches(&sub, cfg.kernel_size, cfg.stride)?;
        // Remove the per-patch mean (DC component) before accumulating.
        patches.data.par_chunks_mut(n).for_each(|row| {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            for v in row.iter_mut() {
                *v = (*v as f64 - mean) as f32;
            }
        });
        correlation_accumulate(&patches, &mut total);
        rows += patches.rows;
    }

    let mut r = MatF64::zeros(n, n);
    let mut t = 0;
    for i in 0..n {
        for j in i..n {
            let v = total[t] / rows as f64;
            r.set(i, j, v);
            r.set(j, i, v);
            t += 1;
        }
    }
    let (eigenvalues, eigenvectors) = linalg::symmetric_eig(&r)?;
    build_kernel_set(n, &eigenvalues, &eigenvectors, cfg.truncation)
}

/// Assemble a kernel set from the eigendecomposition of the AC correlation
/// matrix: drop the eigenvector spanning the DC direction, clamp and truncate
/// the spectrum, and re-orthonormalize against the DC vector.
fn build_kernel_set(
    n: usize,
    eigenvalues: &[f64],
    eigenvectors: &[Vec<f64>],
    truncation: Truncation,
) -> Result<SaakKernelSet> {
    let a0 = vec![1.0 / (n as f64).sqrt(); n];
    // the DC direction lives in the null space of R; drop its eigenvector
    let mut dc_like = 0;
    let mut best = -1.0;
    for (i, v) in eigenvectors.iter().enumerate() {
        let d = linalg::dot(v, &a0).abs();
        if d > best {
            best = d;
            dc_like = i;
        }
    }
    let mut vals: Vec<f64> = Vec::with_capacity(n - 1);
    let mut vecs: Vec<&Vec<f64>> = Vec::with_capacity(n - 1);
    for i in 0..n {
        if i != dc_like {
            vals.push(eigenvalues[i].max(0.0));
            vecs.push(&eigenvectors[i]);
        }
    }

    let avail = n - 1;
    let retained = match truncation {
        Truncation::KeepAll => avail,
        Truncation::TopK(k) => {
            if k < 1 || k > n {
                return Err(SaakError::Config(format!(
                    "top-K {} outside [1, {}] for patch dimension {}",
                    k, n, n
                )));
            }
            k - 1
        }
        Truncation::Energy(t) => {
            let total: f64 = vals.iter().sum();
            let floor = ENERGY_FLOOR.min(avail);
            if total <= 0.0 {
                floor
            } else {
                let mut cum = 0.0;
                let mut m = avail;
                for (i, &v) in vals.iter().enumerate() {
                    cum += v;
                    if cum / total >= t {
                        m = i + 1;
                        break;
                    }
                }
                m.max(floor)
            }
        }
    };

    // orthonormalize the retained vectors against a0 and each other
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(retained);
    for v in vecs.iter().take(retained) {
        let mut w = (*v).clone();
        let d = linalg::dot(&w, &a0);
        for (wi, ai) in w.iter_mut().zip(&a0) {
            *wi -= d * ai;
        }
        for b in &basis {
            let d = linalg::dot(&w, b);
            for (wi, bi) in w.iter_mut().zip(b) {
                *wi -= d * bi;
            }
        }
        let nrm = linalg::norm(&w);
        if nrm < 1e-12 {
            return Err(SaakError::Numeric(
                "degenerate eigenvector collapsed onto the span of prior kernels".into(),
            ));
        }
        for wi in w.iter_mut() {
            *wi /= nrm;
        }
        linalg::fix_sign(&mut w);
        basis.push(w);
    }

    Ok(SaakKernelSet {
        input_dim: n,
        dc: dc_vector(n)?,
        ac_basis: basis
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect(),
        eigenvalues: vals[..retained].to_vec(),
    })
}

/// Per-component absolute cosine similarity between two kernel sets, plus the
/// mean over components. Eigenvector sign is arbitrary under near-degenerate
/// spectra, hence the absolute value.
pub struct CosineSimilarity {
    pub per_component: Vec<f64>,
    pub mean: f64,
}

pub fn kernel_cosine_similarity(a: &SaakKernelSet, b: &SaakKernelSet) -> Result<CosineSimilarity> {
    if a.input_dim != b.input_dim || a.retained() != b.retained() {
        return Err(SaakError::Domain(format!(
            "kernel sets differ in shape: {}x{} vs {}x{}",
            a.retained(),
            a.input_dim,
            b.retained(),
            b.input_dim
        )));
    }
    let per_component: Vec<f64> = a
        .ac_basis
        .iter()
        .zip(&b.ac_basis)
        .map(|(x, y)| {
            let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
            for (&xi, &yi) in x.iter().zip(y) {
                dot += xi as f64 * yi as f64;
                nx += (xi as f64).powi(2);
                ny += (yi as f64).powi(2);
            }
            (dot / (nx.sqrt() * ny.sqrt())).abs()
        })
        .collect();
    let mean = if per_component.is_empty() {
        1.0
    } else {
        per_component.iter().sum::<f64>() / per_component.len() as f64
    };
    Ok(CosineSimilarity {
        per_component,
        mean,
    })
}

const META_HEADER: &str = "saak-kernel-meta v1";

/// Persist a kernel set as a tensor file (row 0 = DC, rows 1.. = AC basis)
/// plus a human-readable `.meta` sidecar next to it.
pub fn save_kernels(path: &Path, cfg: &StageConfig, set: &SaakKernelSet) -> Result<()> {
    let rows = 1 + set.retained();
    let mut data = Vec::with_capacity(rows * set.input_dim);
    data.extend_from_slice(&set.dc);
    for v in &set.ac_basis {
        data.extend_from_slice(v);
    }
    Tensor::new(vec![rows, set.input_dim], data)?.save(path)?;

    let eig: Vec<String> = set.eigenvalues.iter().map(|v| format!("{:e}", v)).collect();
    let meta = format!(
        "{}\nkernel_size = {}\nstride = {}\npool = {}\ntruncation = {}\ninput_dim = {}\nretained_ac = {}\neigenvalues = {}\n",
        META_HEADER,
        cfg.kernel_size,
        cfg.stride,
        cfg.pool,
        cfg.truncation,
        set.input_dim,
        set.retained(),
        eig.join(",")
    );
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

pub fn load_kernels(path: &Path) -> Result<(StageConfig, SaakKernelSet)> {
    let tensor = Tensor::load(path)?;
    if tensor.rank() != 2 {
        return Err(SaakError::Format(format!(
            "{}: kernel tensor must be rank 2",
            path.display()
        )));
    }
    let meta_file = meta_path(path);
    let text = std::fs::read_to_string(&meta_file)?;
    let mut lines = text.lines();
    if lines.next() != Some(META_HEADER) {
        return Err(SaakError::Format(format!(
            "{}: missing '{}' header",
            meta_file.display(),
            META_HEADER
        )));
    }
    let mut kv = std::collections::HashMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let field = |name: &str| -> Result<&String> {
        kv.get(name).ok_or_else(|| {
            SaakError::Format(format!("{}: missing field '{}'", meta_file.display(), name))
        })
    };
    let cfg = StageConfig {
        kernel_size: field("kernel_size")?
            .parse()
            .map_err(|_| SaakError::Format("bad kernel_size in kernel meta".into()))?,
        stride: field("stride")?
            .parse()
            .map_err(|_| SaakError::Format("bad stride in kernel meta".into()))?,
        pool: field("pool")?.parse()?,
        truncation: field("truncation")?.parse()?,
    };
    let input_dim: usize = field("input_dim")?
        .parse()
        .map_err(|_| SaakError::Format("bad input_dim in kernel meta".into()))?;
    let retained: usize = field("retained_ac")?
        .parse()
        .map_err(|_| SaakError::Format("bad retained_ac in kernel meta".into()))?;
    let eig_str = field("eigenvalues")?;
    let eigenvalues: Vec<f64> = if eig_str.is_empty() {
        Vec::new()
    } else {
        eig_str
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| SaakError::Format(format!("bad eigenvalue '{}'", s)))
            })
            .collect::<Result<_>>()?
    };
    if tensor.dims() != [1 + retained, input_dim] || eigenvalues.len() != retained {
        return Err(SaakError::Format(format!(
            "{}: tensor dims {:?} disagree with meta ({} + 1 rows of {})",
            path.display(),
            tensor.dims(),
            retained,
            input_dim
        )));
    }
    let dc = tensor.data()[..input_dim].to_vec();
    let ac_basis = (0..retained)
        .map(|i| tensor.data()[(i + 1) * input_dim..(i + 2) * input_dim].to_vec())
        .collect();
    Ok((
        cfg,
        SaakKernelSet {
            input_dim,
            dc,
            ac_basis,
            eigenvalues,
        },
    ))
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("meta")
}
