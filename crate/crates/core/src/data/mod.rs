//! Samples, the class map, dataset loading and splitting, augmentation, and
//! the synthetic fisheye scene generator.

mod augment;
mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, Augmentation};
pub use io::{
    load_dataset, load_sample, preprocess_image, preprocess_mask, read_mask, read_rgb, resize_mask, resize_rgb,
    split_indices, write_dataset, write_sample, DatasetSplits, SplitRatios,
};
pub use synth::{generate_dataset, generate_scene, render_scene, FisheyeCameraModel, RenderedScene, SceneConfig};

pub const NUM_CLASSES: usize = 10;

/// Class ids in results-table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Road = 1,
    Lanemark = 2,
    Curb = 3,
    Person = 4,
    Rider = 5,
    Vehicles = 6,
    Bicycle = 7,
    Motorcycle = 8,
    TrafficSign = 9,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::Road,
        Class::Lanemark,
        Class::Curb,
        Class::Person,
        Class::Rider,
        Class::Vehicles,
        Class::Bicycle,
        Class::Motorcycle,
        Class::TrafficSign,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// Bijection between class names and ids.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClassMap;

impl ClassMap {
    pub const NAMES: [&'static str; NUM_CLASSES] = [
        "background",
        "road",
        "lanemark",
        "curb",
        "person",
        "rider",
        "vehicles",
        "bicycle",
        "motorcycle",
        "traffic_sign",
    ];

    pub fn len(&self) -> usize {
        NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: u8) -> Option<&'static str> {
        Self::NAMES.get(id as usize).copied()
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| i as u8)
    }
}

/// Camera position a sample was taken from; `Syn` marks generated scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewTag {
    #[serde(rename = "FV")]
    Fv,
    #[serde(rename = "MVR")]
    Mvr,
    #[serde(rename = "MVL")]
    Mvl,
    #[serde(rename = "RV")]
    Rv,
    #[serde(rename = "SYN")]
    Syn,
}

impl ViewTag {
    pub const ALL: [ViewTag; 5] = [ViewTag::Fv, ViewTag::Mvr, ViewTag::Mvl, ViewTag::Rv, ViewTag::Syn];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewTag::Fv => "FV",
            ViewTag::Mvr => "MVR",
            ViewTag::Mvl => "MVL",
            ViewTag::Rv => "RV",
            ViewTag::Syn => "SYN",
        }
    }
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewTag::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Dataset(format!("unknown view tag {s:?}")))
    }
}

/// An RGB image in `[0, 1]` with its per-pixel class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[3, H, W]`
    pub image: Tensor<f32>,
    /// `H·W` class ids, row-major.
    pub mask: Vec<u8>,
    pub view: ViewTag,
    pub id: String,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>, view: ViewTag, id: impl Into<String>) -> Result<Self> {
        let [c, h, w] = match image.shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::dim(format!("sample image must be [3,H,W], got {s:?}"))),
        };
        if c != 3 || mask.len() != h * w {
            return Err(Error::dim(format!(
                "image {:?} and mask of {} pixels disagree",
                image.shape(),
                mask.len()
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&m| m as usize >= NUM_CLASSES) {
            return Err(Error::Label(format!("mask value {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { image, mask, view, id: id.into() })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// `<view>_<id>`
    pub fn stem(&self) -> String {
        format!("{}_{}", self.view, self.id)
    }
}

/// Stacks samples of equal size into a `[B,3,H,W]` batch and the
/// concatenated masks.
pub fn collate(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::dim(format!("batch mixes shapes {:?} and {:?}", shape, s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    let batch = Tensor::new(vec![samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((batch, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_map_is_bijective_and_ordered() {
        let map = ClassMap;
        for (i, c) in Class::ALL.iter().enumerate() {
            assert_eq!(c.id() as usize, i);
            assert_eq!(map.id(map.name(i as u8).unwrap()), Some(i as u8));
        }
        assert_eq!(map.name(10), None);
        for (name, label) in ClassMap::NAMES.iter().zip(crate::metrics::TABLE_CATEGORIES) {
            assert_eq!(name.replace('_', " "), label.to_lowercase());
        }
    }

    #[test]
    fn view_tags_parse() {
        for v in ViewTag::ALL {
            assert_eq!(v.as_str().parse::<ViewTag>().unwrap(), v);
        }
        assert!("XX".parse::<ViewTag>().is_err());
    }

    #[test]
    fn sample_validation() {
        let img = Tensor::zeros(vec![3, 2, 2]);
        assert!(SegmentationSample::new(img.clone(), vec![0; 4], ViewTag::Syn, "a").is_ok());
        assert!(matches!(SegmentationSample::new(img.clone(), vec![0; 3], ViewTag::Syn, "a"), Err(Error::Dimension(_))));
        assert!(matches!(SegmentationSample::new(img, vec![10; 4], ViewTag::Syn, "a"), Err(Error::Label(_))));
    }

    #[test]
    fn collate_stacks() {
        let a = SegmentationSample::new(Tensor::full(vec![3, 1, 2], 0.5), vec![1, 2], ViewTag::Fv, "0").unwrap();
        let b = SegmentationSample::new(Tensor::full(vec![3, 1, 2], 0.25), vec![3, 4], ViewTag::Fv, "1").unwrap();
        let (x, m) = collate(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 1, 2]);
        assert_eq!(m, vec![1, 2, 3, 4]);
        assert_eq!(x.data()[6], 0.25);
    }
}
