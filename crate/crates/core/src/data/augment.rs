use rand::Rng;

use super::SegmentationSample;

/// Photometric and geometric jitter for one training sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    /// Added to every channel.
    pub brightness: f32,
    /// Scales the distance from mid-grey.
    pub contrast: f32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flip: false, brightness: 0.0, contrast: 1.0 };

    /// Flip with probability ½, brightness ~ U(−0.2, 0.2), contrast ~ U(0.8, 1.2).
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(-0.2f32..0.2),
            contrast: rng.random_range(0.8f32..1.2),
        }
    }

    /// Brightness, then contrast, then clamp to `[0, 1]`; the flip applies to
    /// image and mask together.
    pub fn apply(&self, sample: &SegmentationSample) -> SegmentationSample {
        let mut out = sample.clone();
        let (h, w) = (sample.height(), sample.width());
        if self.flip {
            for plane in out.image.data_mut().chunks_mut(w) {
                plane.reverse();
            }
            for row in out.mask.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.brightness != 0.0 || self.contrast != 1.0 {
            let (b, k) = (self.brightness, self.contrast);
            out.image.data_mut().iter_mut().for_each(|v| *v = (((*v + b) - 0.5) * k + 0.5).clamp(0.0, 1.0));
        }
        debug_assert_eq!(out.mask.len(), h * w);
        out
    }
}

/// Draws an augmentation and applies it. Training only.
pub fn augment(sample: &SegmentationSample, rng: &mut impl Rng) -> SegmentationSample {
    Augmentation::sample(rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ViewTag;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SegmentationSample {
        let data = (0..3 * 4 * 5).map(|i| (i as f32 * 0.37).fract()).collect();
        let mask = (0..20).map(|i| (i % 10) as u8).collect();
        SegmentationSample::new(Tensor::new(vec![3, 4, 5], data).unwrap(), mask, ViewTag::Syn, "t").unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let f = Augmentation { flip: true, ..Augmentation::IDENTITY };
        let once = f.apply(&s);
        assert_ne!(once, s);
        assert_eq!(once.mask[0], s.mask[4]);
        assert_eq!(f.apply(&once), s);
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let s = sample();
        assert_eq!(Augmentation::IDENTITY.apply(&s), s);
    }

    #[test]
    fn photometric_changes_leave_mask_alone() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Augmentation { flip: false, ..Augmentation::sample(&mut rng) };
            let out = a.apply(&s);
            assert_eq!(out.mask, s.mask);
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn brightness_then_contrast() {
        let s = sample();
        let a = Augmentation { flip: false, brightness: 0.1, contrast: 1.1 };
        let v = s.image.data()[7];
        assert!((a.apply(&s).image.data()[7] - ((v + 0.1 - 0.5) * 1.1 + 0.5).clamp(0.0, 1.0)).abs() < 1e-7);
    }

    #[test]
    fn sampled_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<_> = (0..1000).map(|_| Augmentation::sample(&mut rng)).collect();
        let flips = draws.iter().filter(|a| a.flip).count();
        assert!((400..600).contains(&flips));
        assert!(draws.iter().all(|a| a.brightness.abs() <= 0.2 && (0.8..=1.2).contains(&a.contrast)));
    }
}
