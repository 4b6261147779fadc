//! Convolution blocks and encoder/decoder stages.
//!
//! A block is two 3×3 convolutions, each followed by batch normalisation and
//! ReLU. The residual kind adds a shortcut (identity, or a 1×1 projection when
//! the channel count changes) before the final ReLU:
//!
//! ```text
//! plain:    y = ReLU(BN(Conv(ReLU(BN(Conv(x))))))
//! residual: y = ReLU(BN(Conv(ReLU(BN(Conv(x))))) + shortcut(x))
//! ```
//!
//! The deformable kinds swap both 3×3 convolutions for deformable ones, each
//! with its own zero-initialised offset predictor.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Plain,
    Residual,
    DeformablePlain,
    DeformableResidual,
}

impl BlockKind {
    pub fn is_residual(self) -> bool {
        matches!(self, BlockKind::Residual | BlockKind::DeformableResidual)
    }

    pub fn is_deformable(self) -> bool {
        matches!(self, BlockKind::DeformablePlain | BlockKind::DeformableResidual)
    }

    /// The same block family with deformable convolutions switched on or off.
    pub fn with_deformable(self, deformable: bool) -> Self {
        match (self.is_residual(), deformable) {
            (false, false) => BlockKind::Plain,
            (false, true) => BlockKind::DeformablePlain,
            (true, false) => BlockKind::Residual,
            (true, true) => BlockKind::DeformableResidual,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Plain => "plain",
            BlockKind::Residual => "residual",
            BlockKind::DeformablePlain => "deformable_plain",
            BlockKind::DeformableResidual => "deformable_residual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub modulated: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        Self { kind, in_channels, out_channels, modulated: false }
    }

    pub fn modulated(mut self, modulated: bool) -> Self {
        self.modulated = modulated;
        self
    }

    /// Trainable scalars this block registers, in closed form.
    pub fn parameter_count(&self) -> usize {
        let (i, o) = (self.in_channels, self.out_channels);
        let conv = |cin: usize| cin * o * 9 + o;
        let mut n = conv(i) + conv(o) + 2 * (2 * o);
        if self.kind.is_deformable() {
            let pred_out = if self.modulated { 27 } else { 18 };
            n += (i * pred_out * 9 + pred_out) + (o * pred_out * 9 + pred_out);
        }
        if self.kind.is_residual() && i != o {
            n += i * o + o;
        }
        n
    }
}

/// Square-kernel convolution parameters.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Kaiming-uniform weights, zero bias.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add_param(
            format!("{name}.weight"),
            kaiming_uniform(&shape, in_channels * kernel * kernel, rng),
        )?;
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_channels]))?;
        Ok(Self { weight, bias: Some(bias), stride: 1, padding: kernel / 2 })
    }

    /// All-zero weights and bias (offset predictors).
    pub fn zeros<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.add_param(
            format!("{name}.weight"),
            Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]),
        )?;
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_channels]))?;
        Ok(Self { weight, bias: Some(bias), stride: 1, padding: kernel / 2 })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = self.bias.map(|b| s.param(b)).transpose()?;
        s.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Deformable 3×3 convolution with its own offset predictor.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub conv: Conv,
    pub predictor: Conv,
    pub kernel: usize,
    pub modulated: bool,
}

impl DeformConv {
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let pw = s.param(self.predictor.weight)?;
        let pb = self.predictor.bias.map(|b| s.param(b)).transpose()?;
        let field = s.graph.offset_predictor(
            x,
            pw,
            pb,
            self.kernel,
            self.conv.stride,
            self.conv.padding,
            self.modulated,
        )?;
        let w = s.param(self.conv.weight)?;
        let b = self.conv.bias.map(|b| s.param(b)).transpose()?;
        s.graph.deform_conv2d(x, w, b, field, self.conv.stride, self.conv.padding)
    }
}

#[derive(Clone, Debug)]
pub enum ConvUnit {
    Plain(Conv),
    Deformable(DeformConv),
}

impl ConvUnit {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        deformable: bool,
        modulated: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv = Conv::new(store, name, in_channels, out_channels, 3, rng)?;
        if !deformable {
            return Ok(ConvUnit::Plain(conv));
        }
        let pred_out = if modulated { 27 } else { 18 };
        let predictor = Conv::zeros(store, &format!("{name}.offset_pred"), in_channels, pred_out, 3)?;
        Ok(ConvUnit::Deformable(DeformConv { conv, predictor, kernel: 3, modulated }))
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Plain(c) => c.forward(s, x),
            ConvUnit::Deformable(d) => d.forward(s, x),
        }
    }
}

/// Batch normalisation with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full(vec![channels], T::one()))?,
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros(vec![channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one()))?,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma)?;
        let beta = s.param(self.beta)?;
        let eps = T::from_f64_lossy(BN_EPS);
        if s.training {
            let (y, stats) = s.graph.batch_norm(x, gamma, beta, BnMode::Train, eps)?;
            let stats = stats.expect("training mode returns batch statistics");
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - m;
            for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                let run = s.store.entry_mut(id).value.data_mut();
                run.iter_mut().zip(batch).for_each(|(r, &v)| *r = keep * *r + m * v);
            }
            Ok(y)
        } else {
            let mean = s.store.value(self.running_mean).data().to_vec();
            let var = s.store.value(self.running_var).data().to_vec();
            let (y, _) = s.graph.batch_norm(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var }, eps)?;
            Ok(y)
        }
    }
}

/// Two conv-BN-ReLU units, optionally residual, optionally deformable.
#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub conv1: ConvUnit,
    pub bn1: BatchNorm,
    pub conv2: ConvUnit,
    pub bn2: BatchNorm,
    pub shortcut: Option<Conv>,
}

impl Block {
    /// Registers the block's parameters under `prefix` and draws its weights.
    /// Offset predictors draw nothing, so a deformable block consumes exactly
    /// the same random stream as its plain twin.
    pub fn new<T: Float>(spec: BlockSpec, prefix: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(Error::config(format!("block {prefix}: channel counts must be positive")));
        }
        let deformable = spec.kind.is_deformable();
        let (i, o) = (spec.in_channels, spec.out_channels);
        let conv1 = ConvUnit::new(store, &format!("{prefix}.conv1"), i, o, deformable, spec.modulated, rng)?;
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), o)?;
        let conv2 = ConvUnit::new(store, &format!("{prefix}.conv2"), o, o, deformable, spec.modulated, rng)?;
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), o)?;
        let shortcut = if spec.kind.is_residual() && i != o {
            Some(Conv::new(store, &format!("{prefix}.shortcut"), i, o, 1, rng)?)
        } else {
            None
        };
        Ok(Self { spec, conv1, bn1, conv2, bn2, shortcut })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let channels = s.graph.value(x).dims4("block input")?[1];
        if channels != self.spec.in_channels {
            return Err(Error::dim(format!(
                "block expects {} input channels, got {channels}",
                self.spec.in_channels
            )));
        }
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h)?;
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        if !self.spec.kind.is_residual() {
            return s.graph.relu(h);
        }
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        let sum = s.graph.add(h, skip)?;
        s.graph.relu(sum)
    }
}

/// Encoder stage: block, then 2×2 max pooling. Returns `(skip, pooled)`.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub block: Block,
}

impl EncoderStage {
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let skip = self.block.forward(s, x)?;
        let pooled = s.graph.max_pool2d(skip)?;
        Ok((skip, pooled))
    }
}

/// Decoder stage: 2× transposed-convolution upsampling, concatenation with
/// the encoder skip, then a block.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub block: Block,
}

impl DecoderStage {
    pub fn new<T: Float>(
        prefix: &str,
        in_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        kind: BlockKind,
        modulated: bool,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let up_weight = store.add_param(
            format!("{prefix}.up.weight"),
            kaiming_uniform(&[in_channels, skip_channels, 2, 2], in_channels, rng),
        )?;
        let up_bias = store.add_param(format!("{prefix}.up.bias"), Tensor::zeros(vec![skip_channels]))?;
        let spec = BlockSpec::new(kind, 2 * skip_channels, out_channels).modulated(modulated);
        let block = Block::new(spec, prefix, store, rng)?;
        Ok(Self { up_weight, up_bias, block })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let w = s.param(self.up_weight)?;
        let b = s.param(self.up_bias)?;
        let up = s.graph.conv_transpose2x2(x, w, Some(b))?;
        let cat = s.graph.concat_channels(&[up, skip])?;
        self.block.forward(s, cat)
    }
}
