//! Labelled image sets: directory loading, LR cache synthesis, stratified
//! splits and a procedural toy dataset.
//!
//! On disk a dataset is `<root>/<class_name>/<image>.png`; classes and files
//! are taken in byte-wise sorted order so labels are stable.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::sr::{bicubic_resize, encode_png, load_image};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// `<class>/<file>` of each image, used to pair HR and LR copies.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Sub-dataset of the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }

    /// Every image resized with bicubic resampling.
    pub fn resized(&self, side: usize) -> Result<Dataset> {
        let images = self
            .images
            .iter()
            .map(|img| bicubic_resize(img, side, side))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            images,
            ..self.clone()
        })
    }

    /// Checks that `other` lists the same files with the same labels.
    pub fn check_paired(&self, other: &Dataset) -> Result<()> {
        if self.names != other.names || self.labels != other.labels {
            return Err(contract_err!(
                "datasets are not paired: {} vs {} images, or file names differ",
                self.len(),
                other.len()
            ));
        }
        Ok(())
    }

    /// Writes every image as `<root>/<class>/<file>`.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for (img, name) in self.images.iter().zip(&self.names) {
            let path = root.join(name);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(&path, encode_png(img)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            !path.is_dir() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Class names plus `(class index, path)` for every image.
pub type ImageListing = (Vec<String>, Vec<(usize, PathBuf)>);

/// Image files of a dataset tree, classes in sorted directory order.
pub fn list_images(root: &Path) -> Result<ImageListing> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut classes = Vec::new();
    let mut files = Vec::new();
    for dir in sorted_entries(root, true)? {
        let label = classes.len();
        classes.push(file_name(&dir));
        for f in sorted_entries(&dir, false)? {
            files.push((label, f));
        }
    }
    Ok((classes, files))
}

/// Loads `<root>/<class>/<image>.png`.
pub fn load_dir(root: &Path) -> Result<Dataset> {
    let (classes, files) = list_images(root)?;
    let mut ds = Dataset {
        classes,
        ..Dataset::default()
    };
    for (label, path) in files {
        ds.images.push(load_image(&path)?);
        ds.labels.push(label);
        ds.names.push(format!(
            "{}/{}",
            ds.classes[label],
            file_name(&path)
        ));
    }
    Ok(ds)
}

/// Directory holding the `size`-pixel LR copy of the dataset at `root`.
pub fn lr_root(root: &Path, size: usize) -> PathBuf {
    let mut name = root.as_os_str().to_os_string();
    name.push(format!("_lr{size}"));
    PathBuf::from(name)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub written: usize,
    pub skipped: usize,
}

/// Mirrors `root` into [`lr_root`] with every image bicubic-resized to
/// `size×size`. Files whose existing content already matches are left alone.
pub fn synth_lr(root: &Path, size: usize) -> Result<SynthReport> {
    if size == 0 {
        return Err(Error::Config("LR size must be positive".into()));
    }
    let (classes, files) = list_images(root)?;
    let out_root = lr_root(root, size);
    let mut report = SynthReport::default();
    for (label, path) in files {
        let img = load_image(&path)?;
        let bytes = encode_png(&bicubic_resize(&img, size, size)?)?;
        let dir = out_root.join(&classes[label]);
        let dst = dir.join(file_name(&path));
        if std::fs::read(&dst).is_ok_and(|old| old == bytes) {
            report.skipped += 1;
            continue;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        std::fs::write(&dst, &bytes).map_err(|e| Error::io(&dst, e))?;
        report.written += 1;
    }
    Ok(report)
}

/// Per-class seeded split: `ceil(fraction · n_c)` of each class goes to the
/// second list (at least one when the class has two or more samples).
pub fn stratified_split(labels: &[usize], fraction: f32, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0005_7a17);
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_val = if fraction <= 0.0 || idx.len() < 2 {
            0
        } else {
            ((fraction * idx.len() as f32).ceil() as usize).clamp(1, idx.len() - 1)
        };
        held.extend_from_slice(&idx[..n_val]);
        keep.extend_from_slice(&idx[n_val..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// Parameters of the procedural toy dataset.
///
/// Each image is an oriented sinusoidal grating over a smooth two-colour
/// background with a few distractor discs and pixel noise. The class fixes
/// the grating orientation (`class · 180° / classes`) up to a uniform
/// jitter. The default frequencies stay below the Nyquist limit of a 4×
/// shrunk copy, so the LR images still carry the class, blurred and at low
/// contrast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    /// Orientation jitter as a fraction of the class spacing.
    pub jitter: f32,
    /// Grating frequency range in cycles per image side.
    pub freq: (f32, f32),
    pub contrast: (f32, f32),
    pub noise: f32,
    pub distractors: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 200,
            side: 64,
            jitter: 0.6,
            freq: (2.0, 6.0),
            contrast: (0.15, 0.35),
            noise: 0.04,
            distractors: 3,
        }
    }
}

fn toy_image(spec: &ToySpec, class: usize, rng: &mut impl Rng) -> Tensor {
    let n = spec.side;
    let spacing = PI / spec.classes as f32;
    let theta = class as f32 * spacing + (rng.random::<f32>() - 0.5) * spec.jitter * spacing;
    let freq = rng.random_range(spec.freq.0..=spec.freq.1);
    let contrast = rng.random_range(spec.contrast.0..=spec.contrast.1);
    let phase = rng.random::<f32>() * 2.0 * PI;
    let (ct, st) = (theta.cos(), theta.sin());
    let k = 2.0 * PI * freq / n as f32;

    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad_angle = rng.random::<f32>() * 2.0 * PI;
    let (gx, gy) = (grad_angle.cos(), grad_angle.sin());
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));

    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..spec.distractors)
        .map(|_| {
            (
                rng.random_range(0.0..n as f32),
                rng.random_range(0.0..n as f32),
                rng.random_range(2.0..n as f32 / 6.0),
                std::array::from_fn(|_| rng.random_range(0.1..0.9)),
            )
        })
        .collect();

    let mut data = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let u = (xf / n as f32 - 0.5) * gx + (yf / n as f32 - 0.5) * gy + 0.5;
            let wave = contrast * (k * (xf * ct + yf * st) + phase).sin();
            let mut px: [f32; 3] =
                std::array::from_fn(|c| c0[c] * (1.0 - u) + c1[c] * u + wave * tint[c]);
            for &(cx, cy, r, col) in &discs {
                if (xf - cx).powi(2) + (yf - cy).powi(2) < r * r {
                    px = col;
                }
            }
            for c in 0..3 {
                let noisy = px[c] + spec.noise * (rng.random::<f32>() * 2.0 - 1.0);
                // stored images are 8-bit
                data[c * n * n + y * n + x] = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(&[3, n, n], data).expect("toy image dims")
}

/// Builds the toy dataset; the same `(spec, seed)` always yields the same
/// images. Classes are interleaved so any prefix is roughly balanced.
pub fn toy_dataset(spec: &ToySpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.side == 0 {
        return Err(Error::Config(
            "toy dataset needs ≥2 classes, ≥1 image per class and a positive side".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let mut ds = Dataset {
        classes: classes.clone(),
        ..Dataset::default()
    };
    for i in 0..spec.per_class {
        for (c, name) in classes.iter().enumerate() {
            ds.images.push(toy_image(spec, c, &mut rng));
            ds.labels.push(c);
            ds.names.push(format!("{name}/{i:05}.png"));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let (train, val) = stratified_split(&labels, 0.1, 3);
        assert_eq!(train.len() + val.len(), 200);
        for c in 0..4 {
            assert_eq!(val.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        assert!(train.iter().all(|i| !val.contains(i)));
        assert_eq!(stratified_split(&labels, 0.1, 3), (train, val));
    }

    #[test]
    fn toy_dataset_is_reproducible() {
        let spec = ToySpec {
            per_class: 2,
            side: 16,
            ..ToySpec::default()
        };
        let a = toy_dataset(&spec, 9).unwrap();
        let b = toy_dataset(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert_eq!(a.labels[..4], [0, 1, 2, 3]);
        for img in &a.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // 8-bit quantized
            assert!(img.data().iter().all(|&v| ((v * 255.0).round() - v * 255.0).abs() < 1e-3));
        }
    }

    #[test]
    fn lr_root_appends_suffix() {
        assert_eq!(lr_root(Path::new("/d/birds"), 56), PathBuf::from("/d/birds_lr56"));
    }
}
