//! Datasets: synthetic glyph generation, image folder ingestion, label
//! files, augmentation and normalization.

mod glyphs;
mod pnm;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{read_exact, read_u16, read_u64, read_u8, Tensor};

pub use glyphs::{
    default_class_names, generate_dataset, render_word, GlyphGrammar, GlyphTemplate, Primitive, Stroke, ALPHABET_SIZE,
    BACKGROUND_RANGE, GLYPHS_PER_IMAGE, PIXEL_NOISE,
};
pub use pnm::{decode_pnm, load_image_folder, padded_size, resize_onto_canvas, GrayImage};

pub const DFLB_MAGIC: &[u8; 4] = b"DFLB";
pub const DFLB_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images `[M, C, s, s]` with values in `[0, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub seed: u64,
    pub class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, seed: u64, class_names: Vec<String>) -> Result<Self> {
        let set = LabeledImageSet {
            images,
            labels,
            split,
            seed,
            class_names,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::contract(format!("images must be [M, C, s, s], got {shape:?}")));
        }
        if shape[0] != self.labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                shape[0],
                self.labels.len()
            )));
        }
        let k = self.num_classes();
        if k > u16::MAX as usize {
            return Err(Error::contract(format!("too many classes: {k}")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `indices` as a new set (same split, seed and class names).
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledImageSet> {
        Ok(LabeledImageSet {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            seed: self.seed,
            class_names: self.class_names.clone(),
        })
    }

    pub fn write_labels<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DFLB_MAGIC)?;
        w.write_all(&DFLB_VERSION.to_le_bytes())?;
        w.write_all(&[self.split.tag()])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.num_classes() as u16).to_le_bytes())?;
        w.write_all(&(self.labels.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.labels.len() * 2);
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u16).to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a label file; returns `(split, seed, num_classes, labels)`.
    pub fn read_labels<R: Read>(r: &mut R) -> Result<(Split, u64, usize, Vec<usize>)> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "DFLB")?;
        if &magic != DFLB_MAGIC {
            return Err(Error::format("DFLB", format!("bad magic {magic:?}")));
        }
        let version = read_u16(r, "DFLB")?;
        if version != DFLB_VERSION {
            return Err(Error::format("DFLB", format!("unsupported version {version}")));
        }
        let tag = read_u8(r, "DFLB")?;
        let split = Split::from_tag(tag).ok_or_else(|| Error::format("DFLB", format!("unknown split tag {tag}")))?;
        let seed = read_u64(r, "DFLB")?;
        let k = read_u16(r, "DFLB")? as usize;
        let m = read_u64(r, "DFLB")? as usize;
        let mut bytes = vec![0u8; m.checked_mul(2).ok_or_else(|| Error::format("DFLB", "size overflow"))?];
        read_exact(r, &mut bytes, "DFLB")?;
        let labels = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        Ok((split, seed, k, labels))
    }

    /// Writes `<split>.images.dftn`, `<split>.labels.dflb` and `classes.txt`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        self.images
            .save(dir.join(format!("{}.images.dftn", self.split.name())))?;
        let path = dir.join(format!("{}.labels.dflb", self.split.name()));
        let file = File::create(&path).map_err(|e| Error::file(&path, e))?;
        let mut w = BufWriter::new(file);
        self.write_labels(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::file(&path, e))?;
        let names = dir.join("classes.txt");
        let mut text = self.class_names.join("\n");
        text.push('\n');
        fs::write(&names, text).map_err(|e| Error::file(&names, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>, split: Split) -> Result<LabeledImageSet> {
        let dir = dir.as_ref();
        let images = Tensor::load(dir.join(format!("{}.images.dftn", split.name())))?;
        let path = dir.join(format!("{}.labels.dflb", split.name()));
        let file = File::open(&path).map_err(|e| Error::file(&path, e))?;
        let (stored, seed, k, labels) = Self::read_labels(&mut BufReader::new(file))?;
        if stored != split {
            return Err(Error::format(
                "DFLB",
                format!("{} holds the {} split", path.display(), stored.name()),
            ));
        }
        let names_path = dir.join("classes.txt");
        let class_names = match fs::read_to_string(&names_path) {
            Ok(text) => text.lines().map(str::to_owned).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => default_class_names(k),
            Err(e) => return Err(Error::file(names_path, e)),
        };
        if class_names.len() != k {
            return Err(Error::format(
                "DFLB",
                format!(
                    "{k} classes in the label file, {} names in classes.txt",
                    class_names.len()
                ),
            ));
        }
        LabeledImageSet::new(images, labels, split, seed, class_names)
    }
}

/// Per-sample brightness and contrast jitter magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Brightness offsets are drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factors are drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

/// `clamp((x - 0.5) * contrast + 0.5 + brightness, 0, 1)` on every pixel.
pub fn adjust_brightness_contrast(pixels: &mut [f64], brightness: f64, contrast: f64) {
    let offset = 0.5 * (1.0 - contrast) + brightness;
    for x in pixels {
        *x = (*x * contrast + offset).clamp(0.0, 1.0);
    }
}

fn symmetric(r: &mut impl RngExt, half_width: f64) -> f64 {
    if half_width > 0.0 {
        r.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Random brightness and contrast, drawn independently for each sample of a
/// `[N, ...]` batch from a stream keyed by `seed` and the row index.
pub fn augment(batch: &Tensor, params: &AugmentParams, seed: u64) -> Tensor {
    let mut out = batch.clone();
    let n = batch.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return out;
    }
    let per = batch.numel() / n;
    for (i, sample) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let mut r = rng::stream(seed, Domain::Augment, i as u64);
        let brightness = symmetric(&mut r, params.brightness);
        let contrast = 1.0 + symmetric(&mut r, params.contrast);
        adjust_brightness_contrast(sample, brightness, contrast);
    }
    out
}

/// `(x - 0.5) / 0.5`
pub fn normalize(batch: &Tensor) -> Tensor {
    batch.map(|x| (x - 0.5) / 0.5)
}

/// `x * 0.5 + 0.5`
pub fn denormalize(batch: &Tensor) -> Tensor {
    batch.map(|x| x * 0.5 + 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.5, 0.7, 1.0]).unwrap();
        let same = augment(
            &x,
            &AugmentParams {
                brightness: 0.0,
                contrast: 0.0,
            },
            3,
        );
        assert_eq!(same, x);

        let mut flat = x.data().to_vec();
        adjust_brightness_contrast(&mut flat, 0.1, 0.0);
        assert_eq!(flat, vec![0.6; 4]);

        let mut half = vec![0.5; 9];
        adjust_brightness_contrast(&mut half, 0.1, 1.0);
        let mean = half.iter().sum::<f64>() / 9.0;
        assert!((mean - 0.6).abs() < 1e-15);
    }

    #[test]
    fn augment_clamps_and_is_reproducible() {
        let x = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let p = AugmentParams {
            brightness: 0.5,
            contrast: 0.9,
        };
        let a = augment(&x, &p, 9);
        assert_eq!(a, augment(&x, &p, 9));
        assert_ne!(a, augment(&x, &p, 10));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalize_examples() {
        let x = Tensor::vector(&[0.5, 1.0, 0.0, 0.25]);
        assert_eq!(normalize(&x).data(), &[0.0, 1.0, -1.0, -0.5]);
        assert_eq!(denormalize(&normalize(&x)), x);
    }

    #[test]
    fn dataset_dir_round_trip() {
        let (train, test) = generate_dataset(3, 2, 1, 16, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train.save_dir(dir.path()).unwrap();
        test.save_dir(dir.path()).unwrap();
        assert_eq!(LabeledImageSet::load_dir(dir.path(), Split::Train).unwrap(), train);
        assert_eq!(LabeledImageSet::load_dir(dir.path(), Split::Test).unwrap(), test);
        let bytes = fs::read(dir.path().join("train.labels.dflb")).unwrap();
        assert_eq!(&bytes[..4], b"DFLB");
    }
}
