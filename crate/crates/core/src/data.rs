//! Labelled image datasets, the synthetic texture task used for desk-scale
//! experiments, and the `GDAT` dataset file.
//!
//! `GDAT` layout (little-endian): magic `GDAT`, version u32 = 1, then u32
//! channels, height, width, num_classes, N; then N × (u16 id length, UTF-8
//! id, u32 label); then N·C·H·W f32 pixels, image-major.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding;

pub const MAGIC: &[u8; 4] = b"GDAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    ids: Vec<String>,
    labels: Vec<usize>,
    images: Vec<f64>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        num_classes: usize,
        ids: Vec<String>,
        labels: Vec<usize>,
        images: Vec<f64>,
    ) -> Result<Self> {
        if shape.contains(&0) || num_classes == 0 {
            return Err(Error::Validation(format!(
                "dataset needs positive extents and classes, got {shape:?} / {num_classes}"
            )));
        }
        if ids.len() != labels.len() || images.len() != ids.len() * shape.iter().product::<usize>() {
            return Err(Error::dim(
                "dataset",
                format!("{} ids, {} labels, {} pixel values for shape {shape:?}", ids.len(), labels.len(), images.len()),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange { row, label, classes: num_classes });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() {
                return Err(Error::Validation("empty image id".into()));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { shape, num_classes, ids, labels, images })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label_pairs(&self) -> impl Iterator<Item = (String, usize)> + '_ {
        self.ids.iter().cloned().zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            images,
        }
    }

    /// Sorts by id and holds out the last `fraction` as validation.
    pub fn split_validation(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let n_train = self.len() - n_val;
        if n_train == 0 || n_val == 0 {
            return Err(Error::Validation(format!(
                "cannot split {} samples into non-empty train/validation parts",
                self.len()
            )));
        }
        Ok((self.subset(&order[..n_train]), self.subset(&order[n_train..])))
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(data: &Dataset) -> Self {
        let [c, h, w] = data.shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..data.len() {
            for (ch, chunk) in data.image(i).chunks(plane).enumerate() {
                for &v in chunk {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (data.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let plane = data.shape[1] * data.shape[2];
        let mut out = data.clone();
        for image in out.images.chunks_mut(data.image_len()) {
            for (ch, chunk) in image.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
            }
        }
        out
    }
}

/// Parameters of the synthetic texture-classification task.
///
/// Each class owns a smooth random texture. A sample is its class texture,
/// circularly shifted by a random offset, scaled by a random contrast in
/// `[0.6, 1.4]`, plus i.i.d. Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 250,
            channels: 1,
            size: 8,
            noise: 1.0,
            seed: 0,
        }
    }
}

fn class_texture(class: usize, c: usize, s: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeding::rng(seed, "texture", class as u64);
    let raw: Vec<f64> = (0..c * s * s).map(|_| rng.sample(StandardNormal)).collect();
    let mut tex = vec![0.0; raw.len()];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in [s - 1, 0, 1] {
                    for dx in [s - 1, 0, 1] {
                        acc += raw[ch * s * s + ((y + dy) % s) * s + (x + dx) % s];
                    }
                }
                tex[ch * s * s + y * s + x] = acc;
            }
        }
    }
    let mean = tex.iter().sum::<f64>() / tex.len() as f64;
    let std = (tex.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tex.len() as f64).sqrt();
    tex.iter().map(|v| (v - mean) / std).collect()
}

/// Generates the synthetic task. Labels are a seeded permutation of a
/// balanced assignment, so any id-ordered split stays roughly balanced.
/// Pixels are rounded to `f32` so the dataset survives a `GDAT` round trip
/// unchanged.
pub fn synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.channels == 0 || cfg.size < 2 {
        return Err(Error::Config(format!("invalid synthetic task {cfg:?}")));
    }
    let (c, s) = (cfg.channels, cfg.size);
    let textures: Vec<Vec<f64>> = (0..cfg.classes).map(|k| class_texture(k, c, s, cfg.seed)).collect();
    let n = cfg.classes * cfg.per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut seeding::rng(cfg.seed, "labels", 0));

    let mut rng = seeding::rng(cfg.seed, "samples", 0);
    let mut images = Vec::with_capacity(n * c * s * s);
    for &label in &labels {
        let tex = &textures[label];
        let (sy, sx) = (rng.random_range(0..s), rng.random_range(0..s));
        let contrast = rng.random_range(0.6..1.4);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let base = tex[ch * s * s + ((y + sy) % s) * s + (x + sx) % s];
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = contrast * base + cfg.noise * noise;
                    images.push(f64::from(v as f32));
                }
            }
        }
    }
    let ids = (0..n).map(|i| format!("img_{i:05}")).collect();
    Dataset::new([c, s, s], cfg.classes, ids, labels, images)
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n = u32::try_from(data.len()).map_err(|_| Error::Validation("too many samples".into()))?;
    for v in [data.shape[0], data.shape[1], data.shape[2], data.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&n.to_le_bytes());
    for (id, &label) in data.ids.iter().zip(&data.labels) {
        let len = u16::try_from(id.len()).map_err(|_| Error::Validation(format!("id too long: `{id}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(label as u32).to_le_bytes());
    }
    for &v in &data.images {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let take = |pos: &mut usize, len: usize, what: &str| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + len)
            .ok_or_else(|| Error::Truncated(format!("dataset file ends inside {what}")))?;
        *pos += len;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad dataset magic, expected GDAT".into()));
    }
    let u32_at = |pos: &mut usize, what: &str| -> Result<usize> {
        Ok(u32::from_le_bytes(take(pos, 4, what)?.try_into().unwrap()) as usize)
    };
    let version = u32_at(&mut pos, "header")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let c = u32_at(&mut pos, "header")?;
    let h = u32_at(&mut pos, "header")?;
    let w = u32_at(&mut pos, "header")?;
    let classes = u32_at(&mut pos, "header")?;
    let n = u32_at(&mut pos, "header")?;
    let mut ids = Vec::with_capacity(n.min(bytes.len()));
    let mut labels = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let len = u16::from_le_bytes(take(&mut pos, 2, "index")?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(&mut pos, len, "index")?)
            .map_err(|_| Error::Format("image id is not UTF-8".into()))?;
        ids.push(id.to_owned());
        labels.push(u32_at(&mut pos, "index")?);
    }
    let expected = [c, h, w, 4]
        .iter()
        .try_fold(n, |acc, &v| acc.checked_mul(v))
        .ok_or_else(|| Error::Format("pixel block size overflows".into()))?;
    if bytes.len() - pos != expected {
        return Err(Error::Truncated(format!(
            "pixel block needs {expected} bytes, file has {}",
            bytes.len() - pos
        )));
    }
    let images = bytes[pos..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Dataset::new([c, h, w], classes, ids, labels, images)
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(data)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
