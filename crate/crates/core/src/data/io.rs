//! PNG dataset layout: `<root>/rgb/<view>_<id>.png` paired with the
//! single-channel index mask `<root>/mask/<view>_<id>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SegmentationSample, ViewTag, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config(format!("split ratios must lie in [0,1], got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("split ratios must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplits {
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
}

impl DatasetSplits {
    pub fn get(&self, name: &str) -> Result<&[SegmentationSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::config(format!("unknown split {name:?}; expected train, val or test"))),
        }
    }

    /// Partitions `samples` with [`split_indices`].
    pub fn from_samples(samples: Vec<SegmentationSample>, ratios: &SplitRatios, seed: u64) -> Result<Self> {
        let views: Vec<ViewTag> = samples.iter().map(|s| s.view).collect();
        let [tr, va, te] = split_indices(&views, ratios, seed)?;
        let mut slots: Vec<Option<SegmentationSample>> = samples.into_iter().map(Some).collect();
        let mut take = |idx: Vec<usize>| idx.into_iter().map(|i| slots[i].take().expect("disjoint")).collect();
        Ok(Self { train: take(tr), val: take(va), test: take(te) })
    }
}

/// Train/val/test index sets, shuffled and split separately within each view
/// so every view is spread over all three partitions. Deterministic in `seed`.
pub fn split_indices(views: &[ViewTag], ratios: &SplitRatios, seed: u64) -> Result<[Vec<usize>; 3]> {
    ratios.validate()?;
    let mut by_view: BTreeMap<ViewTag, Vec<usize>> = BTreeMap::new();
    for (i, v) in views.iter().enumerate() {
        by_view.entry(*v).or_default().push(i);
    }
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (view, mut idx) in by_view {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, view as u64));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
        let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
        out[0].extend_from_slice(&idx[..n_train]);
        out[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        out[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.into_rgb8())
}

/// Single-channel 8-bit index mask.
pub fn read_mask(path: &Path) -> Result<GrayImage> {
    match open(path)? {
        DynamicImage::ImageLuma8(m) => Ok(m),
        other => Err(Error::Dataset(format!(
            "{}: mask must be single-channel 8-bit, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Bilinear resize to `size × size`, scaled to `[0, 1]`, as `[3, S, S]`.
pub fn resize_rgb(img: &RgbImage, size: usize) -> Tensor<f32> {
    let s = size as u32;
    let resized = if img.dimensions() == (s, s) { img.clone() } else { imageops::resize(img, s, s, FilterType::Triangle) };
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = px.0[k] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape")
}

/// Nearest-neighbour resize; never invents labels.
pub fn resize_mask(mask: &GrayImage, size: usize) -> Vec<u8> {
    let s = size as u32;
    let resized = if mask.dimensions() == (s, s) { mask.clone() } else { imageops::resize(mask, s, s, FilterType::Nearest) };
    resized.into_raw()
}

pub fn preprocess_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    Ok(resize_rgb(&read_rgb(path)?, size))
}

pub fn preprocess_mask(path: &Path, size: usize) -> Result<Vec<u8>> {
    let raw = read_mask(path)?;
    if let Some(bad) = raw.as_raw().iter().find(|&&v| v as usize >= NUM_CLASSES) {
        return Err(Error::Label(format!("{}: class index {bad} outside 0..{NUM_CLASSES}", path.display())));
    }
    Ok(resize_mask(&raw, size))
}

pub fn load_sample(root: &Path, view: ViewTag, id: &str, size: usize) -> Result<SegmentationSample> {
    let stem = format!("{view}_{id}.png");
    let image = preprocess_image(&root.join("rgb").join(&stem), size)?;
    let mask = preprocess_mask(&root.join("mask").join(&stem), size)?;
    SegmentationSample::new(image, mask, view, id)
}

fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn parse_stem(stem: &str) -> Result<(ViewTag, String)> {
    let (view, id) = stem
        .split_once('_')
        .ok_or_else(|| Error::Dataset(format!("file name {stem:?} is not <view>_<id>")))?;
    Ok((view.parse()?, id.to_string()))
}

/// Loads every pair under `root`, resizes to `size`, and splits it.
pub fn load_dataset(root: &Path, ratios: &SplitRatios, seed: u64, size: usize) -> Result<DatasetSplits> {
    ratios.validate()?;
    let rgb = list_stems(&root.join("rgb"))?;
    let mask = list_stems(&root.join("mask"))?;
    if rgb != mask {
        let unpaired: Vec<&String> = rgb
            .iter()
            .filter(|s| !mask.contains(s))
            .chain(mask.iter().filter(|s| !rgb.contains(s)))
            .collect();
        return Err(Error::Dataset(format!("unpaired files under {}: {unpaired:?}", root.display())));
    }
    if rgb.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", root.display())));
    }
    let samples = rgb
        .iter()
        .map(|stem| {
            let (view, id) = parse_stem(stem)?;
            load_sample(root, view, &id, size)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetSplits::from_samples(samples, ratios, seed)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the sample's PNG pair; returns the RGB path.
pub fn write_sample(root: &Path, sample: &SegmentationSample) -> Result<PathBuf> {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let d = sample.image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    });
    let mask = GrayImage::from_raw(w as u32, h as u32, sample.mask.clone()).expect("mask size");
    let stem = format!("{}.png", sample.stem());
    let (rgb_dir, mask_dir) = (root.join("rgb"), root.join("mask"));
    fs::create_dir_all(&rgb_dir)?;
    fs::create_dir_all(&mask_dir)?;
    let rgb_path = rgb_dir.join(&stem);
    let mask_path = mask_dir.join(&stem);
    rgb.save(&rgb_path).map_err(|source| Error::Image { path: rgb_path.clone(), source })?;
    mask.save(&mask_path).map_err(|source| Error::Image { path: mask_path, source })?;
    Ok(rgb_path)
}

pub fn write_dataset(root: &Path, samples: &[SegmentationSample]) -> Result<()> {
    samples.iter().try_for_each(|s| write_sample(root, s).map(|_| ()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample(view: ViewTag, id: usize, size: usize) -> SegmentationSample {
        let n = size * size;
        let image = (0..3 * n).map(|i| ((i * 7 + id) % 256) as f32 / 255.0).collect();
        let mask = (0..n).map(|i| ((i + id) % NUM_CLASSES) as u8).collect();
        SegmentationSample::new(Tensor::new(vec![3, size, size], image).unwrap(), mask, view, format!("{id:03}")).unwrap()
    }

    #[test]
    fn stratified_counts() {
        let views: Vec<ViewTag> = (0..40).map(|i| ViewTag::ALL[i % 4]).collect();
        let [tr, va, te] = split_indices(&views, &SplitRatios::default(), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (32, 4, 4));
        for v in &ViewTag::ALL[..4] {
            let count = |s: &[usize]| s.iter().filter(|&&i| views[i] == *v).count();
            assert_eq!((count(&tr), count(&va), count(&te)), (8, 1, 1));
        }
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!(split_indices(&views, &SplitRatios::default(), 1).unwrap(), [tr, va, te]);
    }

    #[test]
    fn bad_ratios() {
        let r = SplitRatios { train: 0.8, val: 0.1, test: 0.2 };
        assert!(matches!(split_indices(&[ViewTag::Fv], &r, 0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = RgbImage::from_pixel(512, 512, image::Rgb([10, 128, 200]));
        let t = resize_rgb(&img, 256);
        assert_eq!(t.shape(), &[3, 256, 256]);
        for (k, c) in [10u8, 128, 200].into_iter().enumerate() {
            assert!(t.data()[k * 65536..(k + 1) * 65536].iter().all(|&v| v == c as f32 / 255.0));
        }
    }

    #[test]
    fn nearest_resize_keeps_label_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (w, h) = (rng.random_range(5..40), rng.random_range(5..40));
            let m = GrayImage::from_fn(w, h, |_, _| image::Luma([rng.random_range(0..NUM_CLASSES as u8)]));
            let src: std::collections::HashSet<u8> = m.as_raw().iter().copied().collect();
            let out = resize_mask(&m, 16);
            assert_eq!(out.len(), 256);
            assert!(out.iter().all(|v| src.contains(v)));
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..8).map(|i| sample(ViewTag::ALL[i % 4], i, 8)).collect();
        write_dataset(dir.path(), &samples).unwrap();
        let splits = load_dataset(dir.path(), &SplitRatios { train: 0.5, val: 0.0, test: 0.5 }, 0, 8).unwrap();
        assert_eq!(splits.train.len() + splits.test.len(), 8);
        let back = splits.train.iter().chain(&splits.test).find(|s| s.id == "003").unwrap();
        assert_eq!(back.mask, samples[3].mask);
        assert_eq!(back.view, ViewTag::Rv);
        assert!(back.image.max_abs_diff(&samples[3].image) < 1e-6);

        fs::remove_file(dir.path().join("mask/FV_000.png")).unwrap();
        assert!(matches!(load_dataset(dir.path(), &SplitRatios::default(), 0, 8), Err(Error::Dataset(_))));

        let bad = GrayImage::from_pixel(8, 8, image::Luma([12]));
        bad.save(dir.path().join("mask/FV_000.png")).unwrap();
        assert!(matches!(load_dataset(dir.path(), &SplitRatios::default(), 0, 8), Err(Error::Label(_))));

        fs::write(dir.path().join("rgb/FV_000.png"), b"not a png").unwrap();
        assert!(matches!(preprocess_image(&dir.path().join("rgb/FV_000.png"), 8), Err(Error::Image { .. })));
    }
}
