//! Per-pixel classification losses: cross-entropy, focal loss and
//! class-weighted focal loss with ENet-style inverse-log-frequency weights.
//!
//! All three are one fused op over `[B, C, H, W]` logits:
//!
//! ```text
//! L = Σ_i w_{t_i} · (1 − p_i)^γ · (−log p_i)  /  Σ_i w_{t_i}
//! ```
//!
//! where `p_i` is the softmax probability of the true class `t_i` at pixel `i`.
//! Cross-entropy is `γ = 0, w ≡ 1`; focal loss is `w ≡ 1`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::graph::{Backward, GradCtx};
use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Default focusing parameter.
pub const DEFAULT_GAMMA: f64 = 2.0;
/// Default ENet smoothing constant.
pub const DEFAULT_ENET_C: f64 = 1.02;

/// Loss selector, spelled as in the report column suffixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    /// `ce`: cross-entropy.
    CrossEntropy,
    /// `nwf`: unweighted focal loss.
    Focal,
    /// `wf`: class-weighted focal loss.
    WeightedFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::CrossEntropy, LossKind::Focal, LossKind::WeightedFocal];

    pub fn token(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "nwf",
            LossKind::WeightedFocal => "wf",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "nwf" | "focal" => Ok(LossKind::Focal),
            "wf" | "weighted_focal" => Ok(LossKind::WeightedFocal),
            other => Err(Error::config(format!("unknown loss {other:?}; expected ce, nwf or wf"))),
        }
    }
}

/// ENet class weights `w_i = 1 / ln(c + p_i)`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub c: f64,
    pub source_frequencies: Vec<f64>,
}

impl ClassWeights {
    pub fn enet(freq: &[f64], c: f64) -> Result<Self> {
        if c.is_nan() || c <= 1.0 {
            return Err(Error::config(format!("ENet constant must exceed 1, got {c}")));
        }
        if freq.is_empty() {
            return Err(Error::config("empty class-frequency vector"));
        }
        if let Some(bad) = freq.iter().find(|f| !(**f >= 0.0) || !f.is_finite()) {
            return Err(Error::config(format!("class frequency {bad} is not a probability")));
        }
        let total: f64 = freq.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("class frequencies sum to {total}, not 1")));
        }
        let weights = freq.iter().map(|&p| 1.0 / (c + p).ln()).collect();
        Ok(Self { weights, c, source_frequencies: freq.to_vec() })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
            c: DEFAULT_ENET_C,
            source_frequencies: vec![1.0 / num_classes as f64; num_classes],
        }
    }
}

/// Pixel share of each class over a set of label maps.
pub fn class_frequencies<'a>(masks: impl IntoIterator<Item = &'a [u8]>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for mask in masks {
        for &v in mask {
            let slot = counts
                .get_mut(v as usize)
                .ok_or_else(|| Error::Label(format!("class {v} outside 0..{num_classes}")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Dataset("no labelled pixels to count".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// A fully specified training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    pub weights: Option<ClassWeights>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self { kind: LossKind::CrossEntropy, gamma: 0.0, weights: None }
    }

    pub fn focal(gamma: f64) -> Self {
        Self { kind: LossKind::Focal, gamma, weights: None }
    }

    pub fn weighted_focal(gamma: f64, weights: ClassWeights) -> Self {
        Self { kind: LossKind::WeightedFocal, gamma, weights: Some(weights) }
    }

    pub fn apply<T: Float>(&self, graph: &mut Graph<T>, logits: Var, target: &[u8]) -> Result<Var> {
        match self.kind {
            LossKind::CrossEntropy => graph.cross_entropy(logits, target),
            LossKind::Focal => graph.focal_loss(logits, target, self.gamma),
            LossKind::WeightedFocal => {
                let w = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::config("weighted focal loss needs class weights"))?;
                graph.weighted_focal(logits, target, self.gamma, w)
            }
        }
    }
}

struct PixelLoss<T> {
    logits: Var,
    target: Vec<u8>,
    gamma: T,
    weights: Option<Vec<T>>,
    weight_sum: T,
}

/// `d/dℓ [ −(1 − e^ℓ)^γ · ℓ ]` at `ℓ = log p`.
fn focal_slope<T: Float>(log_p: T, gamma: T) -> T {
    if gamma == T::zero() {
        return -T::one();
    }
    let p = log_p.exp();
    let q = T::one() - p;
    if q <= T::zero() {
        return T::zero();
    }
    gamma * q.powf(gamma - T::one()) * p * log_p - q.powf(gamma)
}

impl<T: Float> Backward<T> for PixelLoss<T> {
    fn name(&self) -> &'static str {
        "pixel_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let z = ctx.value(self.logits);
        let [b, c, h, w] = z.dims4("logits").expect("rank 4");
        let z = z.data();
        let plane = h * w;
        let scale = grad[0] / self.weight_sum;
        let Some(dz) = ctx.slot(self.logits) else { return };
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let t = self.target[bi * plane + p] as usize;
                let lse = log_sum_exp((0..c).map(|ci| z[base + ci * plane + p]));
                let log_pt = z[base + t * plane + p] - lse;
                let wt = self.weights.as_ref().map_or(T::one(), |w| w[t]);
                let k = scale * wt * focal_slope(log_pt, self.gamma);
                for ci in 0..c {
                    let i = base + ci * plane + p;
                    let pc = (z[i] - lse).exp();
                    let delta = if ci == t { T::one() } else { T::zero() };
                    dz[i] += k * (delta - pc);
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    fn pixel_loss(&mut self, logits: Var, target: &[u8], gamma: f64, weights: Option<&ClassWeights>) -> Result<Var> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::config(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let [b, c, h, w] = self.value(logits).dims4("logits")?;
        if target.len() != b * h * w {
            return Err(Error::dim(format!(
                "target has {} labels for logits [{b}, {c}, {h}, {w}]",
                target.len()
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
            return Err(Error::Label(format!("target class {bad} outside 0..{c}")));
        }
        let weights: Option<Vec<T>> = match weights {
            Some(cw) if cw.weights.len() != c => {
                return Err(Error::dim(format!("{} class weights for {c} classes", cw.weights.len())));
            }
            Some(cw) => {
                if cw.weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                    return Err(Error::config("class weights must be finite and positive"));
                }
                Some(cw.weights.iter().map(|&w| T::from_f64_lossy(w)).collect())
            }
            None => None,
        };
        let gamma_t = T::from_f64_lossy(gamma);
        let z = self.value(logits).data();
        let plane = h * w;
        let mut total = T::zero();
        let mut weight_sum = T::zero();
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let t = target[bi * plane + p] as usize;
                let lse = log_sum_exp((0..c).map(|ci| z[base + ci * plane + p]));
                let log_pt = z[base + t * plane + p] - lse;
                let modulating = if gamma == 0.0 {
                    T::one()
                } else {
                    (T::one() - log_pt.exp()).max(T::zero()).powf(gamma_t)
                };
                let wt = weights.as_ref().map_or(T::one(), |w| w[t]);
                total += wt * modulating * (-log_pt);
                weight_sum += wt;
            }
        }
        if weight_sum == T::zero() {
            return Err(Error::dim("loss over zero pixels"));
        }
        let out = Tensor::scalar(total / weight_sum);
        self.push_op(
            out,
            Box::new(PixelLoss { logits, target: target.to_vec(), gamma: gamma_t, weights, weight_sum }),
        )
    }

    /// Mean over all pixels of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        self.pixel_loss(logits, target, 0.0, None)
    }

    /// Mean over all pixels of `−(1 − p_t)^γ · log p_t`.
    pub fn focal_loss(&mut self, logits: Var, target: &[u8], gamma: f64) -> Result<Var> {
        self.pixel_loss(logits, target, gamma, None)
    }

    /// Focal loss with each pixel weighted by its true class, normalised by
    /// the sum of the applied weights.
    pub fn weighted_focal(&mut self, logits: Var, target: &[u8], gamma: f64, weights: &ClassWeights) -> Result<Var> {
        self.pixel_loss(logits, target, gamma, Some(weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(g: &mut Graph<f64>, shape: [usize; 4], data: Vec<f64>) -> Var {
        g.variable(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) * 6.0 - 3.0
            })
            .collect()
    }

    /// Per-pixel softmax, written out independently of the op.
    fn brute_force(z: &[f64], target: &[u8], c: usize, plane: usize, gamma: f64, w: &[f64]) -> f64 {
        let b = target.len() / plane;
        let (mut num, mut den) = (0.0, 0.0);
        for bi in 0..b {
            for p in 0..plane {
                let exps: Vec<f64> = (0..c).map(|ci| z[bi * c * plane + ci * plane + p].exp()).collect();
                let t = target[bi * plane + p] as usize;
                let pt = exps[t] / exps.iter().sum::<f64>();
                num += w[t] * (1.0 - pt).powf(gamma) * -pt.ln();
                den += w[t];
            }
        }
        num / den
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 2, 3], vec![0.7; 60]);
        let l = g.cross_entropy(z, &[0, 3, 9, 1, 1, 5]).unwrap();
        assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut data = vec![0.0; 10 * 4];
        let target = [2u8, 7, 0, 9];
        for (p, &t) in target.iter().enumerate() {
            data[t as usize * 4 + p] = 20.0;
        }
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 2, 2], data);
        let l = g.cross_entropy(z, &target).unwrap();
        assert!(g.value(l).data()[0] < 1e-3);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let data = pseudo_random(2 * 10 * 4, 3);
        let target = [0u8, 4, 9, 2, 2, 5, 8, 1];
        let mut g = Graph::new();
        let z = logits(&mut g, [2, 10, 2, 2], data.clone());
        let l = g.cross_entropy(z, &target).unwrap();
        let expected = brute_force(&data, &target, 10, 4, 0.0, &[1.0; 10]);
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_with_half_probability() {
        // true class logit ln 9 above nine equal rivals: p_t = 9/(9+9) = 1/2
        let mut data = vec![0.0; 10];
        data[3] = 9f64.ln();
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 1, 1], data);
        let l = g.focal_loss(z, &[3], 2.0).unwrap();
        assert!((g.value(l).data()[0] - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy_and_never_exceeds_it() {
        let data = pseudo_random(10 * 9, 11);
        let target = [0u8, 1, 2, 3, 4, 5, 6, 7, 8];
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 3, 3], data.clone());
        let ce = g.cross_entropy(z, &target).unwrap();
        let f0 = g.focal_loss(z, &target, 0.0).unwrap();
        let f2 = g.focal_loss(z, &target, 2.0).unwrap();
        let (ce, f0, f2) = (g.value(ce).data()[0], g.value(f0).data()[0], g.value(f2).data()[0]);
        assert!((ce - f0).abs() < 1e-6);
        assert!(f2 <= ce);
        // per pixel as well
        for p in 0..9 {
            let one: Vec<f64> = (0..10).map(|c| data[c * 9 + p]).collect();
            let mut g = Graph::new();
            let z = logits(&mut g, [1, 10, 1, 1], one);
            let ce = g.cross_entropy(z, &target[p..p + 1]).unwrap();
            let f = g.focal_loss(z, &target[p..p + 1], 2.0).unwrap();
            assert!(g.value(f).data()[0] <= g.value(ce).data()[0]);
        }
    }

    #[test]
    fn negative_gamma_rejected() {
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 1, 1], vec![0.0; 10]);
        assert!(matches!(g.focal_loss(z, &[0], -0.5), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_target_is_label_error() {
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 1, 2], vec![0.0; 20]);
        assert!(matches!(g.cross_entropy(z, &[0, 10]), Err(Error::Label(_))));
    }

    #[test]
    fn weighted_focal_two_pixels_by_hand() {
        let data = pseudo_random(10 * 2, 5);
        let target = [1u8, 6];
        let mut w = vec![1.0; 10];
        w[6] = 3.0;
        let cw = ClassWeights { weights: w.clone(), c: 1.02, source_frequencies: vec![0.1; 10] };
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 1, 2], data.clone());
        let l = g.weighted_focal(z, &target, 2.0, &cw).unwrap();
        let pt = |p: usize| {
            let e: Vec<f64> = (0..10).map(|c| data[c * 2 + p].exp()).collect();
            e[target[p] as usize] / e.iter().sum::<f64>()
        };
        let term = |p: usize| (1.0 - pt(p)).powi(2) * -pt(p).ln();
        let expected = (1.0 * term(0) + 3.0 * term(1)) / 4.0;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        assert!((expected - brute_force(&data, &target, 10, 2, 2.0, &w)).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_reduce_to_focal() {
        let data = pseudo_random(10 * 6, 9);
        let target = [9u8, 0, 3, 3, 7, 2];
        let cw = ClassWeights { weights: vec![2.5; 10], c: 1.02, source_frequencies: vec![0.1; 10] };
        let mut g = Graph::new();
        let z = logits(&mut g, [1, 10, 2, 3], data);
        let wf = g.weighted_focal(z, &target, 2.0, &cw).unwrap();
        let f = g.focal_loss(z, &target, 2.0).unwrap();
        let wf0 = g.weighted_focal(z, &target, 0.0, &cw).unwrap();
        let ce = g.cross_entropy(z, &target).unwrap();
        assert!((g.value(wf).data()[0] - g.value(f).data()[0]).abs() < 1e-6);
        assert!((g.value(wf0).data()[0] - g.value(ce).data()[0]).abs() < 1e-6);
    }

    #[test]
    fn enet_single_class_dataset() {
        let mut freq = vec![0.0; 10];
        freq[0] = 1.0;
        let w = ClassWeights::enet(&freq, 1.02).unwrap();
        assert!((w.weights[0] - 1.0 / 2.02f64.ln()).abs() < 1e-12);
        // 30-digit reference values
        assert!((w.weights[0] - 1.422_277_826_001_915_7).abs() < 1e-6);
        for &wi in &w.weights[1..] {
            assert!((wi - 1.0 / 1.02f64.ln()).abs() < 1e-12);
            assert!((wi - 50.498_349_791_843_94).abs() < 1e-6);
        }
    }

    #[test]
    fn enet_uniform_and_monotone() {
        let w = ClassWeights::enet(&[0.1; 10], 1.02).unwrap();
        assert!(w.weights.iter().all(|&x| x == w.weights[0]));
        let freq = [0.4, 0.25, 0.15, 0.1, 0.05, 0.03, 0.01, 0.006, 0.003, 0.001];
        let w = ClassWeights::enet(&freq, 1.02).unwrap();
        assert!(w.weights.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn enet_validation() {
        assert!(ClassWeights::enet(&[0.5, 0.5], 1.0).is_err());
        assert!(ClassWeights::enet(&[1.2, -0.2], 1.02).is_err());
        assert!(ClassWeights::enet(&[0.5, 0.4], 1.02).is_err());
    }

    #[test]
    fn loss_tokens_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.token().parse::<LossKind>().unwrap(), k);
        }
        assert!("dice".parse::<LossKind>().is_err());
    }

    #[test]
    fn frequencies_count_pixels() {
        let a = [0u8, 0, 1, 2];
        let b = [2u8, 2, 2, 2];
        let f = class_frequencies([&a[..], &b[..]], 3).unwrap();
        assert_eq!(f, vec![0.25, 0.125, 0.625]);
        assert!(class_frequencies([&[5u8][..]], 3).is_err());
    }
}
