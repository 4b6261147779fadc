//! Central-difference gradient checks in f64.
//!
//! Every case draws a random instance, runs forward and backward once, then
//! perturbs each input element by `±h` and compares. Operations with kinks
//! (ReLU, max pooling, bilinear sampling at integer coordinates) report how
//! close the instance sits to one; instances closer than the case's margin
//! are redrawn, so a difference quotient never straddles a kink.
//!
//! Error for a target is `max|analytic − numeric| / max(‖numeric‖∞, ‖analytic‖∞)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, Graph, Var};
use crate::blocks::{Block, BlockKind, BlockSpec, ConvUnit};
use crate::deform::DeformableKernelField;
use crate::error::{Error, Result};
use crate::losses::ClassWeights;
use crate::params::{derive_seed, ParamStore, Session};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
const MAX_REDRAWS: u64 = 400;

/// One differentiable input of an instance.
pub struct Input {
    pub name: String,
    /// Inputs sharing a group are reported together.
    pub group: String,
    pub value: Tensor<f64>,
}

pub struct Evaluation {
    pub loss: f64,
    /// One per input, when requested.
    pub grads: Option<Vec<Tensor<f64>>>,
    pub kink_margin: Option<f64>,
}

type EvalFn = Box<dyn Fn(&[Tensor<f64>], bool) -> Result<Evaluation>>;

pub struct Instance {
    pub inputs: Vec<Input>,
    pub eval: EvalFn,
}

pub struct GradCase {
    pub name: String,
    /// Minimum kink distance an instance must keep.
    pub min_margin: f64,
    pub make: Box<dyn Fn(u64) -> Result<Instance>>,
}

impl GradCase {
    fn new(name: &str, min_margin: f64, make: impl Fn(u64) -> Result<Instance> + 'static) -> Self {
        Self { name: name.to_string(), min_margin, make: Box::new(make) }
    }
}

/// Result for one (case, group) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub targets: Vec<Target>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.targets.is_empty() && self.targets.iter().all(|t| t.passed)
    }

    pub fn render(&self) -> String {
        let mut s = format!("gradient check: central differences h={}, tolerance {:e}\n", self.step, self.tolerance);
        for t in &self.targets {
            let _ = write!(
                s,
                "{} {:<44} max_rel_err={:.3e} elements={}",
                if t.passed { "PASS" } else { "FAIL" },
                t.name,
                t.max_rel_err,
                t.elements
            );
            if let Some(n) = &t.note {
                let _ = write!(s, " ({n})");
            }
            s.push('\n');
        }
        let failed = self.targets.iter().filter(|t| !t.passed).count();
        let _ = writeln!(s, "{} targets, {failed} failed", self.targets.len());
        s
    }
}

/// Scales every analytic gradient of `case` by `factor`; a checker that
/// accepts the result is broken.
pub fn corrupted(case: GradCase, factor: f64) -> GradCase {
    let make = case.make;
    GradCase {
        name: format!("{} (corrupted)", case.name),
        min_margin: case.min_margin,
        make: Box::new(move |seed| {
            let inst = make(seed)?;
            let eval = inst.eval;
            Ok(Instance {
                inputs: inst.inputs,
                eval: Box::new(move |vals, want| {
                    let mut e = eval(vals, want)?;
                    if let Some(gs) = &mut e.grads {
                        for g in gs.iter_mut() {
                            *g = g.map(|v| v * factor);
                        }
                    }
                    Ok(e)
                }),
            })
        }),
    }
}

/// Checks one case; returns one target per input group.
pub fn check_case(case: &GradCase, seed: u64) -> Result<Vec<Target>> {
    let mut chosen = None;
    let mut best_margin = f64::NEG_INFINITY;
    for attempt in 0..MAX_REDRAWS {
        let inst = (case.make)(derive_seed(seed, attempt))?;
        let values: Vec<Tensor<f64>> = inst.inputs.iter().map(|i| i.value.clone()).collect();
        let base = (inst.eval)(&values, true)?;
        let margin = base.kink_margin.unwrap_or(f64::INFINITY);
        best_margin = best_margin.max(margin);
        if margin >= case.min_margin {
            chosen = Some((inst, values, base));
            break;
        }
    }
    let mut groups: Vec<String> = Vec::new();
    let Some((inst, mut values, base)) = chosen else {
        groups.push("all".into());
        return Ok(vec![Target {
            name: case.name.clone(),
            max_rel_err: f64::INFINITY,
            elements: 0,
            passed: false,
            note: Some(format!("no instance with kink margin ≥ {} (best {best_margin:.2e})", case.min_margin)),
        }]);
    };
    let grads = base.grads.ok_or_else(|| Error::State("case returned no gradients".into()))?;
    for i in &inst.inputs {
        if !groups.contains(&i.group) {
            groups.push(i.group.clone());
        }
    }
    // per group: (max |a - n|, max |n|, max |a|, elements)
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); groups.len()];
    for (k, input) in inst.inputs.iter().enumerate() {
        let gi = groups.iter().position(|g| *g == input.group).unwrap();
        for j in 0..input.value.numel() {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + STEP;
            let plus = (inst.eval)(&values, false)?.loss;
            values[k].data_mut()[j] = orig - STEP;
            let minus = (inst.eval)(&values, false)?.loss;
            values[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads[k].data()[j];
            let a = &mut acc[gi];
            a.0 = a.0.max((analytic - numeric).abs());
            a.1 = a.1.max(numeric.abs());
            a.2 = a.2.max(analytic.abs());
            a.3 += 1;
        }
    }
    Ok(groups
        .iter()
        .zip(acc)
        .map(|(g, (diff, n, a, count))| {
            let scale = n.max(a);
            let err = if scale == 0.0 { 0.0 } else { diff / scale };
            let note = (scale == 0.0).then(|| "gradient identically zero".to_string());
            Target {
                name: format!("{}/{g}", case.name),
                max_rel_err: err,
                elements: count,
                passed: err < TOLERANCE && scale > 0.0,
                note,
            }
        })
        .collect())
}

/// Runs every case whose name contains `selector` (all when `None`).
pub fn gradcheck(selector: Option<&str>, seed: u64) -> Result<GradReport> {
    gradcheck_with(selector, seed, None)
}

/// [`gradcheck`], optionally with every analytic gradient scaled by
/// `corrupt` — a self-test that the checker rejects wrong backward passes.
pub fn gradcheck_with(selector: Option<&str>, seed: u64, corrupt: Option<f64>) -> Result<GradReport> {
    let cases: Vec<GradCase> = standard_cases()
        .into_iter()
        .filter(|c| selector.is_none_or(|s| c.name.contains(s)))
        .map(|c| match corrupt {
            Some(f) => corrupted(c, f),
            None => c,
        })
        .collect();
    if cases.is_empty() {
        return Err(Error::config(format!("no gradient check matches {selector:?}")));
    }
    let mut targets = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        targets.extend(check_case(c, derive_seed(seed, i as u64))?);
    }
    Ok(GradReport { step: STEP, tolerance: TOLERANCE, targets })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn input(name: &str, value: Tensor<f64>) -> Input {
    Input { name: name.into(), group: name.into(), value }
}

/// Reduces a tensor to a scalar through a fixed random projection, so every
/// output element gets a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, proj: &Tensor<f64>) -> Result<Var> {
    let r = g.input(proj.clone())?;
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Case over a plain graph: every input becomes a variable, `build` records
/// the op, and the output is projected to a scalar (unless already scalar).
fn graph_case(
    name: &str,
    min_margin: f64,
    draw: impl Fn(&mut ChaCha8Rng) -> Vec<Input> + 'static,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Clone + 'static,
) -> GradCase {
    GradCase::new(name, min_margin, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = draw(&mut rng);
        let proj_seed: u64 = rng.random();
        let build = build.clone();
        let eval = move |vals: &[Tensor<f64>], want: bool| -> Result<Evaluation> {
            let mut g = Graph::new();
            let vars = vals.iter().map(|v| g.variable(v.clone())).collect::<Result<Vec<_>>>()?;
            let y = build(&mut g, &vars)?;
            let loss = if g.value(y).rank() == 0 {
                y
            } else {
                let shape = g.value(y).shape().to_vec();
                let proj = uniform(&mut ChaCha8Rng::seed_from_u64(proj_seed), &shape, -1.0, 1.0);
                project(&mut g, y, &proj)?
            };
            let kink_margin = g.kink_margin();
            let value = g.value(loss).data()[0];
            let grads = if want {
                g.backward(loss)?;
                Some(vars.iter().map(|&v| g.grad(v).expect("variable")).collect())
            } else {
                None
            };
            Ok(Evaluation { loss: value, grads, kink_margin })
        };
        Ok(Instance { inputs, eval: Box::new(eval) })
    })
}

/// Offsets whose sample points all sit at least 0.15 px from an integer.
fn fractional_offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.15..0.85))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn block_case(name: &str, kind: BlockKind, cin: usize, cout: usize, modulated: bool) -> GradCase {
    GradCase::new(name, 1e-2, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let spec = BlockSpec::new(kind, cin, cout).modulated(modulated);
        let block = Block::new(spec, "b", &mut store, &mut rng)?;
        // offset predictors: small weights, biases that keep sample points
        // away from integer positions
        for unit in [&block.conv1, &block.conv2] {
            if let ConvUnit::Deformable(d) = unit {
                let w = store.entry_mut(d.predictor.weight);
                let shape = w.value.shape().to_vec();
                w.value = uniform(&mut rng, &shape, -2e-3, 2e-3);
                let b = store.entry_mut(d.predictor.bias.expect("predictor bias"));
                let n = b.value.numel();
                let frac: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..0.7)).collect();
                b.value = Tensor::new(vec![n], frac)?;
            }
        }
        // non-trivial batch-norm affine parameters
        for e in store.entries_mut().filter(|e| e.trainable && e.name.contains(".bn")) {
            let shape = e.value.shape().to_vec();
            let (lo, hi) = if e.name.ends_with("weight") { (0.5, 1.5) } else { (-0.3, 0.3) };
            e.value = uniform(&mut rng, &shape, lo, hi);
        }
        let x = uniform(&mut rng, &[2, cin, 4, 4], -1.0, 1.0);
        let proj = uniform(&mut rng, &[2, cout, 4, 4], -1.0, 1.0);
        let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        let mut inputs = vec![input("input", x)];
        for &id in &ids {
            let e = store.entry(id);
            inputs.push(Input { name: e.name.clone(), group: "params".into(), value: e.value.clone() });
        }
        let eval = move |vals: &[Tensor<f64>], want: bool| -> Result<Evaluation> {
            let mut st = store.clone();
            for (&id, v) in ids.iter().zip(&vals[1..]) {
                st.entry_mut(id).value = v.clone();
            }
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &mut st, true);
            let xv = s.graph.variable(vals[0].clone())?;
            let y = block.forward(&mut s, xv)?;
            let loss = project(&mut g, y, &proj)?;
            let kink_margin = g.kink_margin();
            let value = g.value(loss).data()[0];
            let grads = if want {
                g.backward(loss)?;
                st.zero_grad();
                st.accumulate_grads(&g);
                let mut out = vec![g.grad(xv).expect("input grad")];
                out.extend(ids.iter().map(|&id| {
                    let e = st.entry(id);
                    Tensor::new(e.value.shape().to_vec(), e.grad.clone()).expect("shape")
                }));
                Some(out)
            } else {
                None
            };
            Ok(Evaluation { loss: value, grads, kink_margin })
        };
        Ok(Instance { inputs, eval: Box::new(eval) })
    })
}

fn targets(rng: &mut ChaCha8Rng, n: usize, classes: u8) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn loss_case(name: &str, kind: u8) -> GradCase {
    GradCase::new(name, 0.0, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&mut rng, &[2, 4, 3, 3], -2.0, 2.0);
        let t = targets(&mut rng, 18, 4);
        let weights = ClassWeights::enet(&[0.55, 0.3, 0.1, 0.05], 1.02)?;
        let inputs = vec![input("logits", logits)];
        let eval = move |vals: &[Tensor<f64>], want: bool| -> Result<Evaluation> {
            let mut g = Graph::new();
            let z = g.variable(vals[0].clone())?;
            let loss = match kind {
                0 => g.cross_entropy(z, &t)?,
                1 => g.focal_loss(z, &t, 2.0)?,
                _ => g.weighted_focal(z, &t, 2.0, &weights)?,
            };
            let value = g.value(loss).data()[0];
            let grads = if want {
                g.backward(loss)?;
                Some(vec![g.grad(z).unwrap()])
            } else {
                None
            };
            Ok(Evaluation { loss: value, grads, kink_margin: None })
        };
        Ok(Instance { inputs, eval: Box::new(eval) })
    })
}

/// Everything the suite checks, in report order.
pub fn standard_cases() -> Vec<GradCase> {
    vec![
        graph_case(
            "conv2d",
            0.0,
            |r| {
                vec![
                    input("input", uniform(r, &[2, 3, 5, 5], -1.0, 1.0)),
                    input("weight", uniform(r, &[4, 3, 3, 3], -0.5, 0.5)),
                    input("bias", uniform(r, &[4], -0.5, 0.5)),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        graph_case(
            "conv2d_stride2",
            0.0,
            |r| {
                vec![
                    input("input", uniform(r, &[1, 2, 7, 7], -1.0, 1.0)),
                    input("weight", uniform(r, &[3, 2, 3, 3], -0.5, 0.5)),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], None, 2, 1),
        ),
        graph_case(
            "conv_transpose2x2",
            0.0,
            |r| {
                vec![
                    input("input", uniform(r, &[2, 3, 3, 3], -1.0, 1.0)),
                    input("weight", uniform(r, &[3, 2, 2, 2], -0.5, 0.5)),
                    input("bias", uniform(r, &[2], -0.5, 0.5)),
                ]
            },
            |g, v| g.conv_transpose2x2(v[0], v[1], Some(v[2])),
        ),
        graph_case(
            "deform_conv2d",
            0.05,
            |r| {
                vec![
                    input("input", uniform(r, &[1, 2, 5, 5], -1.0, 1.0)),
                    input("weight", uniform(r, &[3, 2, 3, 3], -0.5, 0.5)),
                    input("bias", uniform(r, &[3], -0.5, 0.5)),
                    input("offset", fractional_offsets(r, &[1, 18, 5, 5])),
                ]
            },
            |g, v| {
                let field = DeformableKernelField { offsets: v[3], modulation: None };
                g.deform_conv2d(v[0], v[1], Some(v[2]), field, 1, 1)
            },
        ),
        graph_case(
            "deform_conv2d_modulated",
            0.05,
            |r| {
                vec![
                    input("input", uniform(r, &[2, 2, 4, 4], -1.0, 1.0)),
                    input("weight", uniform(r, &[2, 2, 3, 3], -0.5, 0.5)),
                    input("offset", fractional_offsets(r, &[2, 18, 4, 4])),
                    input("modulation", uniform(r, &[2, 9, 4, 4], 0.05, 0.95)),
                ]
            },
            |g, v| {
                let field = DeformableKernelField { offsets: v[2], modulation: Some(v[3]) };
                g.deform_conv2d(v[0], v[1], None, field, 1, 1)
            },
        ),
        graph_case(
            "batch_norm",
            0.0,
            |r| {
                vec![
                    input("input", uniform(r, &[2, 3, 3, 3], -1.0, 2.0)),
                    input("gamma", uniform(r, &[3], 0.5, 1.5)),
                    input("beta", uniform(r, &[3], -0.5, 0.5)),
                ]
            },
            |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0),
        ),
        graph_case(
            "max_pool2d",
            1e-2,
            |r| vec![input("input", uniform(r, &[2, 2, 4, 4], -1.0, 1.0))],
            |g, v| g.max_pool2d(v[0]),
        ),
        graph_case(
            "pointwise_ops",
            1e-2,
            |r| {
                vec![
                    input("a", uniform(r, &[1, 2, 3, 3], -1.0, 1.0)),
                    input("b", uniform(r, &[1, 3, 3, 3], -1.0, 1.0)),
                ]
            },
            |g, v| {
                let cat = g.concat_channels(&[v[0], v[1]])?;
                let s = g.sigmoid(cat)?;
                let head = g.narrow_channels(s, 1, 3)?;
                let prod = g.mul(head, v[1])?;
                let r = g.relu(v[1])?;
                let sum = g.add(prod, r)?;
                let sc = g.scale(sum, 1.5)?;
                g.log_softmax_channels(sc)
            },
        ),
        block_case("block_plain", BlockKind::Plain, 2, 3, false),
        block_case("block_residual", BlockKind::Residual, 2, 3, false),
        block_case("block_deformable_plain", BlockKind::DeformablePlain, 2, 3, false),
        block_case("block_deformable_residual", BlockKind::DeformableResidual, 2, 3, true),
        loss_case("loss_cross_entropy", 0),
        loss_case("loss_focal", 1),
        loss_case("loss_weighted_focal", 2),
    ]
}
