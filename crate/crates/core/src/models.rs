//! The four U-Net variants and their forward pass.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::blocks::{Block, BlockKind, BlockSpec, Conv, DecoderStage, EncoderStage};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "V_U-Net")]
    VUNet,
    #[serde(rename = "V_DeU-Net")]
    VDeUNet,
    #[serde(rename = "R_U-Net")]
    RUNet,
    #[serde(rename = "R_DeU-Net")]
    RDeUNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::VUNet, Variant::VDeUNet, Variant::RUNet, Variant::RDeUNet];

    pub fn is_residual(self) -> bool {
        matches!(self, Variant::RUNet | Variant::RDeUNet)
    }

    pub fn is_deformable(self) -> bool {
        matches!(self, Variant::VDeUNet | Variant::RDeUNet)
    }

    /// The variant with the same block family but no deformable layers.
    pub fn plain_twin(self) -> Variant {
        if self.is_residual() {
            Variant::RUNet
        } else {
            Variant::VUNet
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::VUNet => "V_U-Net",
            Variant::VDeUNet => "V_DeU-Net",
            Variant::RUNet => "R_U-Net",
            Variant::RDeUNet => "R_DeU-Net",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::VUNet => 0,
            Variant::VDeUNet => 1,
            Variant::RUNet => 2,
            Variant::RDeUNet => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }

    fn base_kind(self) -> BlockKind {
        if self.is_residual() {
            BlockKind::Residual
        } else {
            BlockKind::Plain
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !matches!(c, '_' | '-')).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "vunet" => Ok(Variant::VUNet),
            "vdeunet" => Ok(Variant::VDeUNet),
            "runet" => Ok(Variant::RUNet),
            "rdeunet" => Ok(Variant::RDeUNet),
            _ => Err(Error::config(format!(
                "unknown variant {s:?}; expected one of V_U-Net, V_DeU-Net, R_U-Net, R_DeU-Net"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    /// Deformable layers also predict a sigmoid modulation mask.
    pub modulated: bool,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: Variant::VUNet, base_channels: 16, depth: 4, num_classes: 10, modulated: false, in_channels: 3 }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, base_channels: usize, depth: usize) -> Self {
        Self { variant, base_channels, depth, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.depth > 12 {
            return Err(Error::config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("channel and class counts must be positive"));
        }
        if self.num_classes > 256 {
            return Err(Error::config("at most 256 classes fit in a u8 mask"));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn kind_at(&self, level: usize) -> BlockKind {
        self.variant.base_kind().with_deformable(self.variant.is_deformable() && level == 0)
    }

    /// Block specs in construction order: encoders, bottleneck, decoders
    /// (deepest first).
    pub fn block_specs(&self) -> Vec<(String, BlockSpec)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for i in 0..self.depth {
            let spec = BlockSpec::new(self.kind_at(i), cin, self.width(i)).modulated(self.modulated);
            out.push((format!("enc{i}"), spec));
            cin = self.width(i);
        }
        out.push((
            "bottleneck".into(),
            BlockSpec::new(self.variant.base_kind(), cin, self.width(self.depth)),
        ));
        for i in (0..self.depth).rev() {
            let spec = BlockSpec::new(self.kind_at(i), 2 * self.width(i), self.width(i)).modulated(self.modulated);
            out.push((format!("dec{i}"), spec));
        }
        out
    }

    /// Trainable scalars, in closed form.
    pub fn parameter_count(&self) -> usize {
        let blocks: usize = self.block_specs().iter().map(|(_, s)| s.parameter_count()).sum();
        let up: usize = (0..self.depth).map(|i| self.width(i + 1) * self.width(i) * 4 + self.width(i)).sum();
        let head = self.base_channels * self.num_classes + self.num_classes;
        blocks + up + head
    }
}

/// U-Net with encoder stages, a bottleneck, decoder stages joined to the
/// encoder by skip concatenations, and a 1×1 classification head.
#[derive(Clone, Debug)]
pub struct UNet<T: Float> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoders: Vec<EncoderStage>,
    bottleneck: Block,
    /// Deepest first.
    decoders: Vec<DecoderStage>,
    head: Conv,
}

impl<T: Float> UNet<T> {
    /// Deterministic in `seed`. Deformable and plain twins built from the same
    /// seed share every common weight, because offset predictors draw nothing.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let specs = config.block_specs();
        let mut encoders = Vec::with_capacity(config.depth);
        for (name, spec) in &specs[..config.depth] {
            encoders.push(EncoderStage { block: Block::new(*spec, name, &mut store, &mut rng)? });
        }
        let (name, spec) = &specs[config.depth];
        let bottleneck = Block::new(*spec, name, &mut store, &mut rng)?;
        let mut decoders = Vec::with_capacity(config.depth);
        for i in (0..config.depth).rev() {
            let w = config.width(i);
            decoders.push(DecoderStage::new(
                &format!("dec{i}"),
                config.width(i + 1),
                w,
                w,
                config.kind_at(i),
                config.modulated,
                &mut store,
                &mut rng,
            )?);
        }
        let head = Conv::new(&mut store, "head", config.base_channels, config.num_classes, 1, &mut rng)?;
        Ok(Self { config: *config, store, encoders, bottleneck, decoders, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    /// Records the forward pass on `graph`; returns logits `[B, classes, H, W]`.
    /// In training mode batch-norm layers use batch statistics and update
    /// their running estimates.
    pub fn forward(&mut self, graph: &mut Graph<T>, images: Var, training: bool) -> Result<Var> {
        let [_, c, h, w] = graph.value(images).dims4("model input")?;
        if c != self.config.in_channels {
            return Err(Error::dim(format!("model expects {} input channels, got {c}", self.config.in_channels)));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Geometry(format!(
                "input extent {h}×{w} is not divisible by 2^depth = {d}"
            )));
        }
        let mut s = Session::new(graph, &mut self.store, training);
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut x = images;
        for enc in &self.encoders {
            let (skip, pooled) = enc.forward(&mut s, x)?;
            skips.push(skip);
            x = pooled;
        }
        x = self.bottleneck.forward(&mut s, x)?;
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder");
            x = dec.forward(&mut s, x, skip)?;
        }
        self.head.forward(&mut s, x)
    }

    /// Evaluation-mode logits for a batch.
    pub fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone())?;
        let y = self.forward(&mut g, x, false)?;
        Ok(g.value(y).clone())
    }

    /// Evaluation-mode per-pixel class predictions, `B·H·W` labels.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.logits(images)?))
    }
}

/// Per-pixel argmax over the channel axis of `[B, C, H, W]` (ties go to the
/// lower class index).
pub fn argmax_channels<T: Float>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = vec![0u8; b * hw];
    for n in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[n * c * hw + p];
            for k in 1..c {
                let v = d[(n * c + k) * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out[n * hw + p] = best as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(b: usize, s: usize, seed: u64) -> Tensor<f32> {
        let n = b * 3 * s * s;
        let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1013) as f32 / 1013.0).collect();
        Tensor::new(vec![b, 3, s, s], data).unwrap()
    }

    #[test]
    fn variant_tokens_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        assert!("U-Net++".parse::<Variant>().is_err());
    }

    #[test]
    fn logits_shape_and_range() {
        let mut m = UNet::<f32>::build(&ModelConfig::new(Variant::RDeUNet, 4, 2), 0).unwrap();
        let x = image(1, 64, 1);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[1, 10, 64, 64]);
        assert!(y.is_finite());
        assert!(m.predict(&x).unwrap().iter().all(|&c| c < 10));
        let zero = m.logits(&Tensor::zeros(vec![1, 3, 16, 16])).unwrap();
        assert!(zero.is_finite());
    }

    #[test]
    fn indivisible_extent_is_geometry_error() {
        let mut m = UNet::<f32>::build(&ModelConfig::new(Variant::VUNet, 4, 3), 0).unwrap();
        assert!(matches!(m.logits(&image(1, 12, 0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(UNet::<f32>::build(&ModelConfig::new(Variant::VUNet, 4, 0), 0).is_err());
        assert!(UNet::<f32>::build(&ModelConfig::new(Variant::VUNet, 0, 2), 0).is_err());
    }

    #[test]
    fn counts_match_closed_form() {
        for v in Variant::ALL {
            for modulated in [false, true] {
                let cfg = ModelConfig { modulated, ..ModelConfig::new(v, 16, 4) };
                let m = UNet::<f32>::build(&cfg, 0).unwrap();
                assert_eq!(m.count_parameters(), cfg.parameter_count(), "{v}");
            }
        }
    }

    #[test]
    fn deformable_extra_is_predictor_total() {
        let plain = ModelConfig::new(Variant::VUNet, 16, 4).parameter_count();
        let deform = ModelConfig::new(Variant::VDeUNet, 16, 4).parameter_count();
        // enc0: 3→16 then 16→16; dec0: 32→16 then 16→16
        let pred = |cin: usize| cin * 18 * 9 + 18;
        assert_eq!(deform - plain, pred(3) + pred(16) + pred(32) + pred(16));
    }

    #[test]
    fn deformable_twin_matches_plain_at_init() {
        for v in [Variant::VDeUNet, Variant::RDeUNet] {
            let mut d = UNet::<f32>::build(&ModelConfig::new(v, 4, 2), 7).unwrap();
            let mut p = UNet::<f32>::build(&ModelConfig::new(v.plain_twin(), 4, 2), 7).unwrap();
            let x = image(2, 16, 3);
            let (yd, yp) = (d.logits(&x).unwrap(), p.logits(&x).unwrap());
            let scale = yp.data().iter().fold(0f32, |m, v| m.max(v.abs()));
            assert!(yd.max_abs_diff(&yp) <= 1e-6 * scale, "{v}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::new(Variant::RUNet, 4, 2);
        let a = UNet::<f32>::build(&cfg, 5).unwrap();
        let b = UNet::<f32>::build(&cfg, 5).unwrap();
        let c = UNet::<f32>::build(&cfg, 6).unwrap();
        let vals = |m: &UNet<f32>| m.store().entries().map(|(_, e)| e.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn naming_scheme() {
        let m = UNet::<f32>::build(&ModelConfig::new(Variant::VDeUNet, 4, 2), 0).unwrap();
        for name in [
            "enc0.conv1.weight",
            "enc0.conv1.offset_pred.weight",
            "enc1.bn2.running_var",
            "bottleneck.conv2.bias",
            "dec1.up.weight",
            "dec0.conv2.offset_pred.bias",
            "head.weight",
            "head.bias",
        ] {
            assert!(m.store().get(name).is_some(), "{name}");
        }
        assert!(m.store().get("enc1.conv1.offset_pred.weight").is_none());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(vec![1, 3, 1, 2], vec![1.0f32, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
