//! Dataset ingestion: CIFAR-10 binary, MNIST IDX, synthetic blobs, Gaussian
//! noise injection, and batching.

use crate::error::{Error, Result};
use crate::rng::SneRng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::Path;

/// Image dataset with pixel values in [0,1] at load time.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// `[M, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

/// Gaussian test-time corruption, mean fixed at zero.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.images.shape[1..].iter().product()
    }

    /// Copy out a batch of samples at the given indices as `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut shape = self.images.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        (Tensor { shape, data }, labels)
    }

    /// Batch index order for one epoch: shuffled when a seeded rng is given,
    /// dataset order otherwise.
    pub fn epoch_batches(&self, batch_size: usize, rng: Option<&mut SneRng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(r) = rng {
            order.shuffle(r);
        }
        order
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3·1024 pixel bytes
const CIFAR_PIXELS: usize = 3072;

fn parse_cifar_file(bytes: &[u8], path: &Path, data: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: size {} is not a multiple of {} bytes",
            path.display(),
            bytes.len(),
            CIFAR_RECORD
        )));
    }
    for (rec, chunk) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::Data(format!(
                "{}: label byte {} > 9 at byte offset {}",
                path.display(),
                label,
                rec * CIFAR_RECORD
            )));
        }
        labels.push(label as usize);
        data.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Load CIFAR-10 from the standard binary layout: `data_batch_{1..5}.bin`
/// for train, `test_batch.bin` for test; per record one label byte followed
/// by 1024 R, 1024 G, 1024 B bytes in row-major 32×32 order.
pub fn load_cifar10_bin(dir: &Path) -> Result<(ImageDataset, ImageDataset)> {
    let make = |files: &[String], split: &str| -> Result<ImageDataset> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let path = dir.join(f);
            let bytes = fs::read(&path)
                .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
            parse_cifar_file(&bytes, &path, &mut data, &mut labels)?;
        }
        let m = labels.len();
        debug_assert_eq!(data.len(), m * CIFAR_PIXELS);
        Ok(ImageDataset {
            images: Tensor::new(vec![m, 3, 32, 32], data)?,
            labels,
            classes: 10,
            split: split.to_string(),
        })
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{}.bin", i)).collect();
    let train = make(&train_files, "train")?;
    let test = make(&["test_batch.bin".to_string()], "test")?;
    Ok((train, test))
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    if read_be_u32(&bytes, 0)? != 0x0000_0803 {
        return Err(Error::Data(format!("{}: bad IDX image magic", path.display())));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let h = read_be_u32(&bytes, 8)? as usize;
    let w = read_be_u32(&bytes, 12)? as usize;
    let pixels = &bytes[16..];
    if pixels.len() != n * h * w {
        return Err(Error::Data(format!("{}: truncated pixel data", path.display())));
    }
    Ok((n, h, w, pixels.iter().map(|&b| b as f64 / 255.0).collect()))
}

fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    if read_be_u32(&bytes, 0)? != 0x0000_0801 {
        return Err(Error::Data(format!("{}: bad IDX label magic", path.display())));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let labels = &bytes[8..];
    if labels.len() != n {
        return Err(Error::Data(format!("{}: truncated label data", path.display())));
    }
    Ok(labels.iter().map(|&b| b as usize).collect())
}

/// Load MNIST from IDX files (`train-images-idx3-ubyte` etc.) as 1×28×28
/// images scaled to [0,1].
pub fn load_mnist_idx(dir: &Path) -> Result<(ImageDataset, ImageDataset)> {
    let make = |img_file: &str, lbl_file: &str, split: &str| -> Result<ImageDataset> {
        let (n, h, w, data) = load_idx_images(&dir.join(img_file))?;
        let labels = load_idx_labels(&dir.join(lbl_file))?;
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} images but {} labels in {} split",
                n,
                labels.len(),
                split
            )));
        }
        Ok(ImageDataset {
            images: Tensor::new(vec![n, 1, h, w], data)?,
            labels,
            classes: 10,
            split: split.to_string(),
        })
    };
    let train = make("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train")?;
    let test = make("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test")?;
    Ok((train, test))
}

/// Synthetic Gaussian blob images: one seeded class center per class in
/// image space, unit-variance samples scaled by `1/separation` around it,
/// clipped to [0,1].
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    shape: &[usize; 3],
    separation: f64,
    seed: u64,
) -> Result<ImageDataset> {
    if separation <= 0.0 {
        return Err(Error::invalid("synth_blobs", "separation must be > 0"));
    }
    let mut rng = crate::rng::substream(seed, "synth_blobs");
    let n = shape[0] * shape[1] * shape[2];
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0 / separation).expect("valid sigma");
    let m = classes * per_class;
    let mut data = Vec::with_capacity(m * n);
    let mut labels = Vec::with_capacity(m);
    for c in 0..classes {
        for _ in 0..per_class {
            for j in 0..n {
                let v: f64 = centers[c][j] + normal.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Ok(ImageDataset {
        images: Tensor::new(vec![m, shape[0], shape[1], shape[2]], data)?,
        labels,
        classes,
        split: "synthetic".to_string(),
    })
}

/// Add independent N(0, σ²) noise to every pixel. Values are intentionally
/// not clamped back to [0,1]; pass `clamp = true` only for sensitivity
/// checks.
pub fn add_gaussian_noise(
    dataset: &ImageDataset,
    spec: &NoiseSpec,
    rng: &mut SneRng,
    clamp: bool,
) -> Result<ImageDataset> {
    if spec.sigma < 0.0 {
        return Err(Error::invalid("add_gaussian_noise", "sigma must be >= 0"));
    }
    let mut out = dataset.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, spec.sigma).expect("valid sigma");
    for v in out.images.data.iter_mut() {
        *v += normal.sample(rng);
        if clamp {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
