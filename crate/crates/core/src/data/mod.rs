//! Directory-per-class image datasets.
//!
//! ```text
//! root/
//!   crack/     *.png | *.jpg | *.jpeg
//!   negative/  ...
//! ```
//!
//! Class indices follow the lexicographic order of the directory names.

mod synth;

pub use synth::{generate_synthetic, SynthTask};

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Side length every image is resized to.
pub const IMAGE_SIZE: u32 = 228;

/// Channels, height and width of a preprocessed image.
pub const IMAGE_DIMS: [usize; 3] = [3, IMAGE_SIZE as usize, IMAGE_SIZE as usize];

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, 228, 228]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub source_path: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_labels: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Number of samples of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Copies the selected samples into `batch` (`[n, 3, h, w]`) and returns
    /// their labels.
    pub fn gather(&self, indices: &[usize], batch: &mut Tensor) -> Result<Vec<usize>> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::EmptyDataset("nothing to batch".into()))?;
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(first.pixels.dims());
        if batch.dims() != dims {
            *batch = Tensor::zeros(&dims)?;
        }
        let len = first.pixels.len();
        let mut labels = Vec::with_capacity(indices.len());
        for (dst, &i) in batch.data_mut().chunks_mut(len).zip(indices) {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample {i} out of {}", self.len())))?;
            dst.copy_from_slice(s.pixels.data());
            labels.push(s.label);
        }
        Ok(labels)
    }
}

/// Converts any decoded image to a `[3, 228, 228]` tensor of `byte / 255`.
///
/// Grayscale and alpha images are converted to RGB first. Other sizes are
/// resampled with a linear (triangle) kernel whose support widens with the
/// downscale factor, so large photos are averaged rather than aliased; a
/// 228x228 image is used as is.
pub fn preprocess_image(img: &DynamicImage) -> Result<Tensor> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("image has no pixels"));
    }
    let mut rgb = img.to_rgb8();
    if rgb.dimensions() != (IMAGE_SIZE, IMAGE_SIZE) {
        rgb = image::imageops::resize(&rgb, IMAGE_SIZE, IMAGE_SIZE, FilterType::Triangle);
    }
    let plane = (IMAGE_SIZE * IMAGE_SIZE) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&IMAGE_DIMS, data)
}

/// Decodes and preprocesses one file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    preprocess_image(&img)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Class directory names in index order.
pub fn class_names(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for p in sorted_entries(root.as_ref())? {
        if p.is_dir() {
            let name = p.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
                Error::invalid(format!("class directory {} is not UTF-8", p.display()))
            })?;
            names.push(name.to_string());
        }
    }
    Ok(names)
}

/// Every image of every class, in class then file-name order. Files that do
/// not decode are skipped with a warning.
pub fn load_all(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let class_labels = class_names(root)?;
    let mut samples = Vec::new();
    for (label, name) in class_labels.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(&root.join(name))?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        let decoded: Vec<Option<Sample>> = files
            .into_par_iter()
            .map(|path| match load_image(&path) {
                Ok(pixels) => Some(Sample {
                    pixels,
                    label,
                    source_path: path,
                }),
                Err(Error::Image { source, .. }) => {
                    log::warn!("skipping {}: {source}", path.display());
                    None
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    None
                }
            })
            .collect();
        let before = samples.len();
        samples.extend(decoded.into_iter().flatten());
        if samples.len() == before {
            return Err(Error::EmptyDataset(format!(
                "class {name:?} has no decodable images"
            )));
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(Dataset {
        samples,
        class_labels,
        split: Split::All,
    })
}

/// Number of test samples for a class of `n`: `ceil(n * fraction)`, with a
/// small tolerance so that fractions like `10 / 150` are not pushed up by
/// rounding.
pub fn test_count(n: usize, fraction: f64) -> usize {
    let exact = n as f64 * fraction;
    ((exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize).min(n)
}

/// Loads `root` and splits each class independently: a seeded shuffle, then
/// the first [`test_count`] samples go to the test set.
pub fn load_dataset(
    root: impl AsRef<Path>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let all = load_all(root)?;
    if all.num_classes() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 class directories, found {}",
            all.num_classes()
        )));
    }
    Ok(split_dataset(all, test_fraction, seed))
}

/// Per-class seeded split of an already loaded dataset.
pub fn split_dataset(all: Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let base = Rng::new(seed);
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); all.num_classes()];
    for s in all.samples {
        by_class[s.label].push(s);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut members) in by_class.into_iter().enumerate() {
        base.fork(label as u64).shuffle(&mut members);
        let k = test_count(members.len(), test_fraction);
        let rest = members.split_off(k);
        test.extend(members);
        train.extend(rest);
    }
    let make = |samples, split| Dataset {
        samples,
        class_labels: all.class_labels.clone(),
        split,
    };
    (make(train, Split::Train), make(test, Split::Test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use image::{GrayImage, Luma, Rgb, RgbImage};
    use proptest::prelude::*;

    fn write_png(path: &Path, w: u32, h: u32, v: u8) {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
            .save(path)
            .unwrap();
    }

    fn tree(classes: &[(&str, usize)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, n) in classes {
            let d = dir.path().join(name);
            fs::create_dir(&d).unwrap();
            for i in 0..*n {
                write_png(&d.join(format!("{i:03}.png")), 8, 8, (i * 7 % 256) as u8);
            }
        }
        dir
    }

    #[test]
    fn gray_image_is_scaled_not_resampled() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(228, 228, Rgb([128, 128, 128])));
        let t = preprocess_image(&img).unwrap();
        assert_eq!(t.dims(), &[3, 228, 228]);
        assert!(t.data().iter().all(|&v| v == 128.0 / 255.0));
        assert!((128.0f64 / 255.0 - 0.501961).abs() < 1e-6);
    }

    #[test]
    fn odd_sizes_are_resized() {
        for (w, h) in [(227, 227), (2560, 1920), (1, 1), (300, 17)] {
            let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(w, h, Rgb([10, 200, 255])));
            let t = preprocess_image(&img).unwrap();
            assert_eq!(t.dims(), &[3, 228, 228]);
            let plane = 228 * 228;
            assert!(t.data()[..plane].iter().all(|&v| v == 10.0 / 255.0));
            assert!(t.data()[2 * plane..].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn grayscale_is_replicated() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_fn(228, 228, |x, _| Luma([x as u8])));
        let t = preprocess_image(&img).unwrap();
        let plane = 228 * 228;
        assert_eq!(&t.data()[..plane], &t.data()[plane..2 * plane]);
        assert_eq!(&t.data()[..plane], &t.data()[2 * plane..]);
        assert_eq!(t.data()[5], 5.0 / 255.0);
    }

    #[test]
    fn test_share_rounds_up() {
        assert_eq!(test_count(20000, 0.06), 1200);
        assert_eq!(test_count(75, 10.0 / 150.0), 5);
        assert_eq!(test_count(10, 0.25), 3);
        assert_eq!(test_count(10, 0.0), 0);
        assert_eq!(test_count(3, 0.99), 3);
    }

    #[test]
    fn classes_are_indexed_lexicographically() {
        let dir = tree(&[("none", 2), ("crack", 2), ("joint", 2)]);
        let all = load_all(dir.path()).unwrap();
        assert_eq!(all.class_labels, ["crack", "joint", "none"]);
        assert_eq!(all.class_counts(), [2, 2, 2]);
        assert!(all.samples[0].source_path.ends_with("crack/000.png"));
    }

    #[test]
    fn split_is_seeded_disjoint_and_per_class() {
        let dir = tree(&[("a", 75), ("b", 75)]);
        let (train, test) = load_dataset(dir.path(), 10.0 / 150.0, 3).unwrap();
        assert_eq!((train.len(), test.len()), (140, 10));
        assert_eq!(test.class_counts(), [5, 5]);
        let mut paths: Vec<_> = train
            .samples
            .iter()
            .chain(&test.samples)
            .map(|s| s.source_path.clone())
            .collect();
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), 150);

        let (train2, test2) = load_dataset(dir.path(), 10.0 / 150.0, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (_, test3) = load_dataset(dir.path(), 10.0 / 150.0, 4).unwrap();
        assert_ne!(test, test3);
    }

    #[test]
    fn undecodable_files_are_skipped() {
        let dir = tree(&[("a", 2), ("b", 1)]);
        fs::write(dir.path().join("a/zz.png"), b"not a png").unwrap();
        fs::write(dir.path().join("a/notes.txt"), b"ignored").unwrap();
        let all = load_all(dir.path()).unwrap();
        assert_eq!(all.class_counts(), [2, 1]);
    }

    #[test]
    fn class_without_images_is_an_error() {
        let dir = tree(&[("a", 2), ("b", 0)]);
        fs::write(dir.path().join("b/broken.jpg"), b"\xff\xd8garbage").unwrap();
        assert!(matches!(load_all(dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn structural_errors() {
        let one = tree(&[("only", 3)]);
        assert!(matches!(
            load_dataset(one.path(), 0.2, 0),
            Err(Error::InvalidArgument(_))
        ));
        let empty = tempfile::tempdir().unwrap();
        let err = load_dataset(empty.path(), 0.2, 0).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
        assert!(load_dataset(empty.path().join("missing"), 0.2, 0).is_err());
        let two = tree(&[("a", 2), ("b", 2)]);
        assert!(load_dataset(two.path(), 1.0, 0).is_err());
    }

    #[test]
    fn gather_builds_batches() {
        let dir = tree(&[("a", 2), ("b", 2)]);
        let all = load_all(dir.path()).unwrap();
        let mut batch = Tensor::zeros(&[1]).unwrap();
        let labels = all.gather(&[3, 0], &mut batch).unwrap();
        assert_eq!(labels, [1, 0]);
        assert_eq!(batch.dims(), &[2, 3, 228, 228]);
        assert_eq!(&batch.data()[..10], &all.samples[3].pixels.data()[..10]);
        assert!(all.gather(&[9], &mut batch).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn preprocessing_always_yields_unit_range(w in 1u32..60, h in 1u32..60, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let img = RgbImage::from_fn(w, h, |_, _| {
                Rgb([rng.range(0, 256) as u8, rng.range(0, 256) as u8, rng.range(0, 256) as u8])
            });
            let t = preprocess_image(&DynamicImage::ImageRgb8(img)).unwrap();
            prop_assert_eq!(t.dims(), &[3, 228, 228]);
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn test_count_is_ceiling(n in 0usize..5000, pct in 0u32..100) {
            let f = pct as f64 / 100.0;
            let k = test_count(n, f);
            prop_assert!(k <= n);
            prop_assert!(k as f64 >= n as f64 * f - 1e-6);
            prop_assert!((k as f64) < n as f64 * f + 1.0);
        }
    }
}
