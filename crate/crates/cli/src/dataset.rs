//! Dataset ingestion: IDX files, raw binary CIFAR-10 batches, and the
//! seeded synthetic two-class generators.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftnet::search::DataSplit;

use crate::config::{DataSpec, SyntheticPattern};

/// Dataset resolved into memory.
pub struct LoadedData {
    pub train: DataSplit,
    pub test: Option<DataSplit>,
    pub classes: usize,
    pub in_channels: usize,
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_U8: u8 = 0x08;

/// Reads an IDX file of unsigned bytes. Errors carry the byte offset of
/// the malformed field.
pub fn read_idx_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading IDX {}", path.display()))?;
    if bytes.len() < 4 {
        bail!("{}: truncated magic at byte 0", path.display());
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        bail!(
            "{}: wrong magic {:02x}{:02x} at byte 0",
            path.display(),
            bytes[0],
            bytes[1]
        );
    }
    if bytes[2] != IDX_U8 {
        bail!(
            "{}: unsupported dtype 0x{:02x} at byte 2 (only u8/0x08)",
            path.display(),
            bytes[2]
        );
    }
    let ndim = bytes[3] as usize;
    if !(1..=4).contains(&ndim) {
        bail!("{}: unsupported rank {} at byte 3", path.display(), ndim);
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 4usize;
    for _ in 0..ndim {
        if bytes.len() < off + 4 {
            bail!("{}: truncated dimension at byte {}", path.display(), off);
        }
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let want: usize = dims.iter().product();
    if bytes.len() != off + want {
        bail!(
            "{}: payload is {} bytes at byte {}, header wants {}",
            path.display(),
            bytes.len() - off,
            off,
            want
        );
    }
    Ok((dims, bytes[off..].to_vec()))
}

pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let want: usize = dims.iter().product();
    if data.len() != want {
        bail!("IDX write: {} values for dims {:?}", data.len(), dims);
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&[0, 0, IDX_U8, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    std::fs::write(path, out).with_context(|| format!("writing IDX {}", path.display()))?;
    Ok(())
}

fn idx_split(
    images_path: &Path,
    labels_path: &Path,
    mean: &[f64],
    std: &[f64],
) -> Result<DataSplit> {
    let (dims, pixels) = read_idx_u8(images_path)?;
    let (ldims, labels) = read_idx_u8(labels_path)?;
    if ldims.len() != 1 {
        bail!("{}: labels must be rank 1", labels_path.display());
    }
    let (n, c, h, w) = match dims.len() {
        3 => (dims[0], 1, dims[1], dims[2]),
        4 => (dims[0], dims[1], dims[2], dims[3]),
        _ => bail!(
            "{}: images must be rank 3 (N,H,W) or 4 (N,C,H,W)",
            images_path.display()
        ),
    };
    if ldims[0] != n {
        bail!(
            "{} has {} labels for {} images",
            labels_path.display(),
            ldims[0],
            n
        );
    }
    let mut data = Vec::with_capacity(pixels.len());
    for (i, &px) in pixels.iter().enumerate() {
        let ch = (i / (h * w)) % c;
        let m = mean.get(ch).copied().unwrap_or(mean[0]);
        let s = std.get(ch).copied().unwrap_or(std[0]);
        data.push((px as f64 / 255.0 - m) / s);
    }
    let images = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), data)?;
    let labels = labels.into_iter().map(|v| v as usize).collect();
    DataSplit::new(images, labels).map_err(anyhow::Error::from)
}

// ---------------------------------------------------------------------------
// Raw binary CIFAR-10
// ---------------------------------------------------------------------------

fn cifar_file(path: &Path, mean: &[f64], std: &[f64]) -> Result<DataSplit> {
    const REC: usize = 3073;
    let bytes =
        std::fs::read(path).with_context(|| format!("reading CIFAR batch {}", path.display()))?;
    if bytes.len() % REC != 0 {
        bail!(
            "{}: size {} is not a multiple of the {}-byte record",
            path.display(),
            bytes.len(),
            REC
        );
    }
    let n = bytes.len() / REC;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for r in 0..n {
        let rec = &bytes[r * REC..(r + 1) * REC];
        labels.push(rec[0] as usize);
        for (i, &px) in rec[1..].iter().enumerate() {
            let ch = i / 1024;
            data.push((px as f64 / 255.0 - mean[ch]) / std[ch]);
        }
    }
    let images = ArrayD::from_shape_vec(IxDyn(&[n, 3, 32, 32]), data)?;
    DataSplit::new(images, labels).map_err(anyhow::Error::from)
}

fn concat_splits(parts: Vec<DataSplit>) -> Result<DataSplit> {
    let views: Vec<_> = parts.iter().map(|p| p.images.view()).collect();
    let images = ndarray::concatenate(ndarray::Axis(0), &views)?;
    let labels = parts.iter().flat_map(|p| p.labels.clone()).collect();
    DataSplit::new(images, labels).map_err(anyhow::Error::from)
}

// ---------------------------------------------------------------------------
// Synthetic two-class generators
// ---------------------------------------------------------------------------

/// Class-conditional gaussian blob images: each class has a fixed bump
/// location, samples add seeded gaussian pixel noise.
pub fn gen_gaussians(
    n: usize,
    h: usize,
    w: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> DataSplit {
    let mut images = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    let mut labels = Vec::with_capacity(n);
    let sigma2 = (h.min(w) as f64 / 3.0).powi(2);
    for i in 0..n {
        let class = i % 2;
        let (cy, cx) = if class == 0 {
            (h as f64 / 3.0, w as f64 / 3.0)
        } else {
            (2.0 * h as f64 / 3.0, 2.0 * w as f64 / 3.0)
        };
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                images[[i, 0, y, x]] = (-d2 / sigma2).exp() + noise * gauss(rng);
            }
        }
        labels.push(class);
    }
    DataSplit::new(images, labels).expect("generator shapes agree")
}

/// Two interleaved spiral arms rendered as soft curves; class = arm.
/// A small per-sample rotation jitter keeps the task non-trivial while
/// the arms stay distinguishable.
pub fn gen_spirals(n: usize, h: usize, w: usize, noise: f64, rng: &mut ChaCha8Rng) -> DataSplit {
    let mut images = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
    let mut labels = Vec::with_capacity(n);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max = cy.min(cx);
    for i in 0..n {
        let class = i % 2;
        let jitter = rng.random_range(-0.5..0.5);
        let phase = class as f64 * std::f64::consts::PI + jitter;
        // trace the arm and stamp soft bumps along it
        let steps = 40;
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let theta = phase + 2.5 * std::f64::consts::PI * t;
            let r = r_max * t;
            let py = cy + r * theta.sin();
            let px = cx + r * theta.cos();
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                    if d2 < 4.0 {
                        let v: f64 = images[[i, 0, y, x]] + (-d2 / 0.8).exp();
                        images[[i, 0, y, x]] = v.min(1.5);
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                images[[i, 0, y, x]] += noise * gauss(rng);
            }
        }
        labels.push(class);
    }
    DataSplit::new(images, labels).expect("generator shapes agree")
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Front door
// ---------------------------------------------------------------------------

pub fn load(spec: &DataSpec, seed: u64) -> Result<LoadedData> {
    match spec {
        DataSpec::Synthetic2d {
            pattern,
            samples,
            test_samples,
            height,
            width,
            noise,
        } => {
            // Fixed offset keeps the data stream independent of the
            // training loop's consumption of the run seed.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
            let gen = |n: usize, rng: &mut ChaCha8Rng| match pattern {
                SyntheticPattern::Gaussians => gen_gaussians(n, *height, *width, *noise, rng),
                SyntheticPattern::Spirals => gen_spirals(n, *height, *width, *noise, rng),
            };
            let train = gen(*samples, &mut rng);
            let test = (*test_samples > 0).then(|| gen(*test_samples, &mut rng));
            Ok(LoadedData {
                train,
                test,
                classes: 2,
                in_channels: 1,
            })
        }
        DataSpec::IdxImages {
            train_images,
            train_labels,
            test_images,
            test_labels,
            normalize_mean,
            normalize_std,
        } => {
            let train = idx_split(train_images, train_labels, normalize_mean, normalize_std)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(idx_split(i, l, normalize_mean, normalize_std)?),
                (None, None) => None,
                _ => bail!("test_images and test_labels must be given together"),
            };
            let classes = train.classes().max(test.as_ref().map_or(0, |t| t.classes()));
            let in_channels = train.images.shape()[1];
            Ok(LoadedData {
                train,
                test,
                classes,
                in_channels,
            })
        }
        DataSpec::RawBinaryCifar {
            dir,
            normalize_mean,
            normalize_std,
        } => {
            let mut parts = Vec::new();
            for i in 1..=5 {
                let p = dir.join(format!("data_batch_{i}.bin"));
                if p.exists() {
                    parts.push(cifar_file(&p, normalize_mean, normalize_std)?);
                }
            }
            if parts.is_empty() {
                bail!("no data_batch_*.bin under {}", dir.display());
            }
            let train = concat_splits(parts)?;
            let test_path = dir.join("test_batch.bin");
            let test = if test_path.exists() {
                Some(cifar_file(&test_path, normalize_mean, normalize_std)?)
            } else {
                None
            };
            Ok(LoadedData {
                train,
                test,
                classes: 10,
                in_channels: 3,
            })
        }
    }
}
