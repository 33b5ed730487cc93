//! Labeled image sets: a deterministic synthetic generator and an IDX loader.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[M, C, S, S]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: &str,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[2] != s[3] || s[0] != labels.len() {
            return Err(Error::Format(format!(
                "images {s:?} do not form a square image batch matching {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Gathers the given samples into a `[B, C, S, S]` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(
                self.images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| T::lit(v as f64)),
            );
        }
        let images = Tensor::new(&[indices.len(), s[1], s[2], s[3]], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Oriented sinusoidal gratings: class `c` has orientation `c·π/classes`,
/// each sample draws a random period in `[3.5, 5.5)` pixels, a random phase
/// and additive Gaussian noise (std 0.1). Sample `i` belongs to class
/// `i mod classes`. Single channel.
pub fn synth_dataset(
    classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || samples_per_class == 0 || image_size == 0 {
        return Err(Error::Config(
            "synthetic dataset sizes must be positive".into(),
        ));
    }
    let mut rng = Rng::seed(seed);
    let m = classes * samples_per_class;
    let px = image_size * image_size;
    let mut data = Vec::with_capacity(m * px);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let c = i % classes;
        let theta = PI * c as f64 / classes as f64;
        let period = 3.5 + 2.0 * rng.uniform();
        let phase = 2.0 * PI * rng.uniform();
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..image_size {
            for x in 0..image_size {
                let u = x as f64 * ct + y as f64 * st;
                let v = 0.5 + 0.4 * (2.0 * PI * u / period + phase).sin() + 0.1 * rng.normal();
                data.push(v as f32);
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(&[m, 1, image_size, image_size], data)?;
    LabeledDataset::new(images, labels, classes, "synthetic")
}

const IDX_UBYTE: u8 = 0x08;

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let fail = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail("bad IDX magic"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(fail("only unsigned-byte IDX payloads are supported"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(fail("IDX payload length does not match its dimensions"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Writes an unsigned-byte IDX file.
pub fn write_idx(path: impl AsRef<Path>, dims: &[usize], payload: &[u8]) -> Result<()> {
    if dims.iter().product::<usize>() != payload.len() || dims.len() > 255 {
        return Err(Error::Contract("IDX dims do not match payload".into()));
    }
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads IDX images (`[M, S, S]` or `[M, C, S, S]`, bytes scaled to `[0, 1]`)
/// and IDX labels (`[M]`). With `num_classes = None` it is inferred as
/// `max(label) + 1`.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let (idims, pixels) = read_idx(images.as_ref())?;
    let (ldims, lbytes) = read_idx(labels.as_ref())?;
    let shape = match idims.as_slice() {
        [m, s1, s2] => vec![*m, 1, *s1, *s2],
        [m, c, s1, s2] => vec![*m, *c, *s1, *s2],
        other => {
            return Err(Error::Format(format!(
                "IDX images must be 3-D or 4-D, got {other:?}"
            )))
        }
    };
    if ldims.len() != 1 || ldims[0] != shape[0] {
        return Err(Error::Format(format!(
            "IDX labels {ldims:?} do not match {} images",
            shape[0]
        )));
    }
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    LabeledDataset::new(Tensor::new(&shape, data)?, labels, classes, "idx")
}
