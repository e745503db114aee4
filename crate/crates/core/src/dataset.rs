//! Dataset ingestion (MNIST IDX, CIFAR-10/STL-10 binary) and heatmap export.
//!
//! All loaders produce the canonical channel-last layout `N x H x W x K0`
//! with pixel bytes scaled by 1/255 into `[0, 1]`.

use std::path::Path;

use crate::error::{Result, SaakError};
use crate::tensor::Tensor;

/// A labeled image collection in canonical layout.
#[derive(Debug, Clone)]
pub struct ImageSet {
    /// Rank-4 tensor `N x H x W x K0`, values in `[0, 1]`.
    pub data: Tensor,
    /// Class id per image, each `< class_count`.
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ImageSet {
    pub fn new(data: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if data.rank() != 4 {
            return Err(SaakError::Domain(format!(
                "image set tensor must be rank 4, got rank {}",
                data.rank()
            )));
        }
        if data.dims()[0] != labels.len() {
            return Err(SaakError::Format(format!(
                "image count {} does not match label count {}",
                data.dims()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(SaakError::Format(format!(
                "label {} out of range for {} classes",
                bad, class_count
            )));
        }
        Ok(ImageSet {
            data,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New set containing the given images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<ImageSet> {
        let dims = self.data.dims();
        let (h, w, k) = (dims[1], dims[2], dims[3]);
        let stride = h * w * k;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            if idx >= self.len() {
                return Err(SaakError::Domain(format!(
                    "subset index {} out of range ({} images)",
                    idx,
                    self.len()
                )));
            }
            data.extend_from_slice(&self.data.data()[idx * stride..(idx + 1) * stride]);
            labels.push(self.labels[idx]);
        }
        ImageSet::new(
            Tensor::new(vec![indices.len(), h, w, k], data)?,
            labels,
            self.class_count,
        )
    }
}

fn read_be_u32(bytes: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

/// Load an MNIST-style IDX image/label file pair.
///
/// Image files carry magic `0x00000803` and big-endian dims `N, rows, cols`;
/// label files carry magic `0x00000801` and dim `N`.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<ImageSet> {
    let img_bytes = std::fs::read(image_path)?;
    let lbl_bytes = std::fs::read(label_path)?;
    if img_bytes.len() < 16 {
        return Err(SaakError::Format(format!(
            "{}: IDX image header truncated ({} bytes)",
            image_path.display(),
            img_bytes.len()
        )));
    }
    if lbl_bytes.len() < 8 {
        return Err(SaakError::Format(format!(
            "{}: IDX label header truncated ({} bytes)",
            label_path.display(),
            lbl_bytes.len()
        )));
    }
    let img_magic = read_be_u32(&img_bytes, 0);
    if img_magic != 0x0000_0803 {
        return Err(SaakError::Format(format!(
            "{}: bad IDX image magic {:#010x}, expected 0x00000803",
            image_path.display(),
            img_magic
        )));
    }
    let lbl_magic = read_be_u32(&lbl_bytes, 0);
    if lbl_magic != 0x0000_0801 {
        return Err(SaakError::Format(format!(
            "{}: bad IDX label magic {:#010x}, expected 0x00000801",
            label_path.display(),
            lbl_magic
        )));
    }
    let n = read_be_u32(&img_bytes, 4) as usize;
    let rows = read_be_u32(&img_bytes, 8) as usize;
    let cols = read_be_u32(&img_bytes, 12) as usize;
    let n_labels = read_be_u32(&lbl_bytes, 4) as usize;
    if n != n_labels {
        return Err(SaakError::Format(format!(
            "image count {} does not match label count {}",
            n, n_labels
        )));
    }
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(SaakError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "{}: payload length {} does not match header (expected {})",
                image_path.display(),
                img_bytes.len(),
                expected
            ),
        )));
    }
    if lbl_bytes.len() != 8 + n {
        return Err(SaakError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "{}: payload length {} does not match header (expected {})",
                label_path.display(),
                lbl_bytes.len(),
                8 + n
            ),
        )));
    }
    let data: Vec<f32> = img_bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    ImageSet::new(Tensor::new(vec![n, rows, cols, 1], data)?, labels, 10)
}

const CIFAR_ROW: usize = 1 + 3 * 32 * 32;

/// Load CIFAR-10 binary batches (rows of 1 label byte + 3072 channel-planar
/// pixel bytes), converting to channel-last layout.
pub fn load_cifar10(batch_paths: &[&Path]) -> Result<ImageSet> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_ROW != 0 {
            return Err(SaakError::Format(format!(
                "{}: file size {} is not a positive multiple of {}",
                path.display(),
                bytes.len(),
                CIFAR_ROW
            )));
        }
        for row in bytes.chunks_exact(CIFAR_ROW) {
            let label = row[0] as usize;
            if label >= 10 {
                return Err(SaakError::Format(format!(
                    "{}: label byte {} out of range [0, 10)",
                    path.display(),
                    label
                )));
            }
            labels.push(label);
            planar_to_channel_last(&row[1..], 32, 32, &mut data);
        }
    }
    let n = labels.len();
    ImageSet::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels, 10)
}

const STL_ROW: usize = 3 * 96 * 96;

/// Load STL-10 binary images plus a separate 1-indexed label file.
pub fn load_stl10(image_path: &Path, label_path: &Path) -> Result<ImageSet> {
    let bytes = std::fs::read(image_path)?;
    if bytes.is_empty() || bytes.len() % STL_ROW != 0 {
        return Err(SaakError::Format(format!(
            "{}: file size {} is not a positive multiple of {}",
            image_path.display(),
            bytes.len(),
            STL_ROW
        )));
    }
    let n = bytes.len() / STL_ROW;
    let lbl_bytes = std::fs::read(label_path)?;
    if lbl_bytes.len() != n {
        return Err(SaakError::Format(format!(
            "{}: {} labels for {} images",
            label_path.display(),
            lbl_bytes.len(),
            n
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for &b in &lbl_bytes {
        if b < 1 || b > 10 {
            return Err(SaakError::Format(format!(
                "{}: STL-10 label byte {} out of range [1, 10]",
                label_path.display(),
                b
            )));
        }
        labels.push(b as usize - 1);
    }
    let mut data = Vec::with_capacity(n * STL_ROW);
    for row in bytes.chunks_exact(STL_ROW) {
        planar_to_channel_last(row, 96, 96, &mut data);
    }
    ImageSet::new(Tensor::new(vec![n, 96, 96, 3], data)?, labels, 10)
}

fn planar_to_channel_last(planar: &[u8], h: usize, w: usize, out: &mut Vec<f32>) {
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push(planar[c * plane + p] as f32 / 255.0);
        }
    }
}

/// Export a rank-2 tensor as an 8-bit grayscale PNG, min-max scaled to
/// `[0, 255]` with round-half-up. A constant input maps to an all-zero image.
pub fn export_heatmap(channel: &Tensor, path: &Path) -> Result<()> {
    if channel.rank() != 2 {
        return Err(SaakError::Domain(format!(
            "heatmap input must be rank 2, got rank {}",
            channel.rank()
        )));
    }
    if channel.data().iter().any(|v| !v.is_finite()) {
        return Err(SaakError::Domain(
            "heatmap input contains non-finite values".into(),
        ));
    }
    let (h, w) = (channel.dims()[0], channel.dims()[1]);
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in channel.data() {
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    let pixels: Vec<u8> = channel
        .data()
        .iter()
        .map(|&v| {
            if range == 0.0 {
                0
            } else {
                ((v - min) / range * 255.0 + 0.5).floor() as u8
            }
        })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("pixel buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| {
            SaakError::Io(std::io::Error::new(
                std::io::ErrorKind::Other,
                format!("{}: {}", path.display(), e),
            ))
        })
}
