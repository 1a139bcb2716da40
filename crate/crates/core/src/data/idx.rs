//! IDX binary format reader/writer (big-endian headers, u8 pixels).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::data::{LabeledDataset, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("truncated IDX file while reading {what}"),
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX image/label pair into a dataset with pixels rescaled to [0,1].
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(image_path)?;
    let label_bytes = fs::read(label_path)?;

    let image_magic = read_u32_be(&image_bytes, 0, "image magic")?;
    if image_magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic 0x{image_magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
        )));
    }
    let label_magic = read_u32_be(&label_bytes, 0, "label magic")?;
    if label_magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file magic 0x{label_magic:08x}, expected 0x{LABEL_MAGIC:08x}"
        )));
    }

    let n_images = read_u32_be(&image_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "image cols")? as usize;
    let n_labels = read_u32_be(&label_bytes, 4, "label count")? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "image count {n_images} != label count {n_labels}"
        )));
    }

    let pixels = &image_bytes[16..];
    let expected = n_images * rows * cols;
    if pixels.len() < expected {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!(
                "image payload holds {} bytes, header promises {expected}",
                pixels.len()
            ),
        )));
    }
    let raw_labels = &label_bytes[8..];
    if raw_labels.len() < n_labels {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!(
                "label payload holds {} bytes, header promises {n_labels}",
                raw_labels.len()
            ),
        )));
    }

    let mut samples = Vec::with_capacity(n_images);
    let mut labels = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let start = i * rows * cols;
        let data: Vec<f32> = pixels[start..start + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        samples.push(Sample {
            features: Tensor::from_vec(&[1, rows, cols], data)?,
            id: i as u64,
        });
        labels.push(raw_labels[i] as usize);
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(samples, labels, num_classes, SplitTag::Train)
}

/// Write a single-channel dataset back to an IDX pair. Pixels are quantized
/// to u8 by rounding `v * 255`.
pub fn save_idx(dataset: &LabeledDataset, image_path: &Path, label_path: &Path) -> Result<()> {
    let shape = dataset.feature_shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Input(format!(
            "IDX export needs single-channel samples, got shape {shape:?}"
        )));
    }
    let (rows, cols) = (shape[1], shape[2]);
    let mut image_bytes = Vec::with_capacity(16 + dataset.len() * rows * cols);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for s in &dataset.samples {
        for &v in s.features.data() {
            image_bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut label_bytes = Vec::with_capacity(8 + dataset.len());
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        label_bytes.push(l as u8);
    }
    let mut f = fs::File::create(image_path)?;
    f.write_all(&image_bytes)?;
    let mut f = fs::File::create(label_path)?;
    f.write_all(&label_bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, pixels: &[u8], labels: &[u8], rows: u32, cols: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        let mut ib = Vec::new();
        ib.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        ib.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        ib.extend_from_slice(&rows.to_be_bytes());
        ib.extend_from_slice(&cols.to_be_bytes());
        ib.extend_from_slice(pixels);
        let mut lb = Vec::new();
        lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        fs::write(&ip, ib).unwrap();
        fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn two_image_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[0, 64, 128, 255, 10, 20, 30, 40], &[0, 1], 2, 2);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.feature_shape(), &[1, 2, 2]);
        assert!((ds.samples[0].features.data()[3] - 1.0).abs() < 1e-6);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn label_magic_in_image_slot_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[0; 8], &[0, 1], 2, 2);
        // Overwrite the image magic with the label magic.
        let mut bytes = fs::read(&ip).unwrap();
        bytes[..4].copy_from_slice(&LABEL_MAGIC.to_be_bytes());
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[0; 8], &[0, 1], 2, 2);
        let mut bytes = fs::read(&lp).unwrap();
        bytes[4..8].copy_from_slice(&3u32.to_be_bytes());
        fs::write(&lp, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn truncated_payload_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[0; 7], &[0, 1], 2, 2);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io(_))));
    }

    #[test]
    fn round_trip_stays_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                features: Tensor::from_vec(
                    &[1, 2, 2],
                    vec![0.1 * i as f32, 0.5, 0.993, 0.007],
                )
                .unwrap(),
                id: i as u64,
            })
            .collect();
        let ds = LabeledDataset::new(samples, vec![0, 1, 2], 3, SplitTag::Train).unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        save_idx(&ds, &ip, &lp).unwrap();
        let reloaded = load_idx(&ip, &lp).unwrap();
        for (a, b) in ds.samples.iter().zip(&reloaded.samples) {
            for (&x, &y) in a.features.data().iter().zip(b.features.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
        assert_eq!(ds.labels, reloaded.labels);
    }
}
