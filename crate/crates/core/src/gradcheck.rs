//! Finite-difference gradient checks, run in f64.
//!
//! Each check compares analytic gradients against central differences and
//! reports the worst relative error next to its tolerance.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RegionGroups, Tape, Var};
use crate::backbone::{build_network, BackboneConfig, Network};
use crate::error::Result;
use crate::objective::{bag_loss, Bag, Objective};
use crate::pooling::{gm_pool_grad, InstanceVector};
use crate::tensor::Tensor;
use crate::train::loss_and_gradients;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\tmax_rel_err={:.3e}\ttol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.samples,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn central(x: f64, step: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Central difference `(GM(p + h e_k) - GM(p - h e_k)) / 2h` of the pooled
/// value, evaluated from the definition without subtracting two nearly equal
/// pooled values, so it stays accurate when the derivative is tiny relative
/// to the pooled value.
pub fn gm_central_difference(p: &[f64], k: usize, h: f64, r: f64) -> f64 {
    let n = p.len() as f64;
    let pk = p[k];
    let rest: f64 = p.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, v)| v.powf(r)).sum();
    let (up, down) = (r * (h / pk).ln_1p(), r * (-h / pk).ln_1p());
    // (pk + h)^r - (pk - h)^r, with exp(up) - exp(down) = exp(down) * expm1(up - down)
    let delta_pow = pk.powf(r) * down.exp() * (up - down).exp_m1();
    let m_down = (rest + (pk - h).powf(r)) / n;
    let gm_down = m_down.powf(1.0 / r);
    let delta = gm_down * ((delta_pow / n / m_down).ln_1p() / r).exp_m1();
    delta / (2.0 * h)
}

/// Closed-form pooling gradient against differences of the pooled value.
pub fn check_gm_pool(seed: u64, vectors: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    for i in 0..vectors {
        let n = rng.gen_range(2..=64);
        // keep away from the clamp edges so the probe stays inside the domain
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let r = [1.0, 2.0, 4.0, 8.0][i % 4];
        let iv = InstanceVector::new(p.iter().copied())?;
        let grad = gm_pool_grad(&iv, r)?;
        for _ in 0..3 {
            let k = rng.gen_range(0..n);
            let numeric = gm_central_difference(&p, k, 1e-5 * p[k], r);
            worst = worst.max(rel_err(grad[k], numeric));
            samples += 1;
        }
    }
    Ok(CheckResult {
        name: "gm_pool".into(),
        samples,
        max_rel_err: worst,
        tolerance: 1e-5,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("dims")
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Checks every input coordinate of `build` through a random projection of its output.
fn check_op(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, tolerance: f64, build: &Build) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<(f64, Vec<Tensor<f64>>, Tensor<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5), tape.value(out).dims(), -1.0, 1.0),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        let mut g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.dims())))
            .collect();
        Ok((value, grads, w))
    };
    let (_, grads, w) = eval(&inputs, None)?;
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    for (ti, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= 32 {
            (0..t.len()).collect()
        } else {
            (0..32).map(|_| rng.gen_range(0..t.len())).collect()
        };
        for k in picks {
            let f = |v: f64| {
                let mut probe = inputs.clone();
                probe[ti].data_mut()[k] = v;
                eval(&probe, Some(&w)).expect("same shapes").0
            };
            let numeric = central(t.data()[k], 1e-6, f);
            worst = worst.max(rel_err(grads[ti].data()[k], numeric));
            samples += 1;
        }
    }
    Ok(CheckResult {
        name: name.into(),
        samples,
        max_rel_err: worst,
        tolerance,
    })
}

/// Per-op suites for the differentiable primitives.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = rand_tensor(&mut rng, &[1, 2, 6, 5], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 0)] {
        out.push(check_op(
            &format!("conv2d(stride={stride},pad={pad})"),
            seed + 1,
            vec![x.clone(), k.clone(), b.clone()],
            1e-5,
            &move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
        )?);
    }
    // distinct, well separated values so no probe flips an argmax
    let mut vals: Vec<f64> = (0..2 * 5 * 7).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    out.push(check_op(
        "maxpool2x2",
        seed + 2,
        vec![Tensor::new(vec![1, 2, 5, 7], vals)?],
        1e-5,
        &|t, v| t.maxpool2x2(v[0]),
    )?);
    out.push(check_op(
        "upsample_bilinear",
        seed + 3,
        vec![rand_tensor(&mut rng, &[1, 1, 3, 4], -1.0, 1.0)],
        1e-5,
        &|t, v| t.upsample_bilinear(v[0], 7, 9),
    )?);
    out.push(check_op(
        "sigmoid",
        seed + 4,
        vec![rand_tensor(&mut rng, &[1, 1, 4, 4], -3.0, 3.0)],
        1e-5,
        &|t, v| Ok(t.sigmoid(v[0])),
    )?);
    let away_from_kink: Vec<f64> = (0..16)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    out.push(check_op(
        "relu",
        seed + 5,
        vec![Tensor::new(vec![1, 1, 4, 4], away_from_kink)?],
        1e-5,
        &|t, v| Ok(t.relu(v[0])),
    )?);
    let probs = rand_tensor(&mut rng, &[1, 1, 4, 6], 0.05, 0.95);
    for r in [1.0, 4.0] {
        out.push(check_op(
            &format!("gm_pool+bce(r={r})"),
            seed + 6,
            vec![probs.clone()],
            1e-5,
            &move |t, v| {
                let p = t.gm_pool(v[0], r)?;
                t.bce(p, 1)
            },
        )?);
    }
    let groups = Arc::new(RegionGroups::new((0..24).map(|i| (i % 5) as u32).collect(), 5)?);
    out.push(check_op(
        "region_mean+positiveness+sq_diff",
        seed + 7,
        vec![probs],
        1e-5,
        &move |t, v| {
            let m = t.region_mean(v[0], groups.clone())?;
            let pos = t.positiveness(m)?;
            t.sq_diff(pos, 0.3)
        },
    )?);
    Ok(out)
}

/// A positive and a negative random bag at `size x size`.
pub fn probe_bags(size: usize, seed: u64) -> Result<Vec<Bag<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        Bag::new(rand_tensor(&mut rng, &[3, size, size], 0.0, 1.0), 1, 0.3)?,
        Bag::new(rand_tensor(&mut rng, &[3, size, size], 0.0, 1.0), 0, 0.0)?,
    ])
}

fn objective_value(network: &Network<f64>, bags: &[Bag<f64>], objective: &Objective) -> Result<f64> {
    let mut total = 0.0;
    for bag in bags {
        total += bag_loss(bag, &network.forward(bag.image())?, objective)?.total;
    }
    Ok(total)
}

/// Full objective through the whole network: tape gradients of `samples`
/// randomly drawn parameter scalars against central differences.
pub fn check_network(
    config: &BackboneConfig,
    bags: &[Bag<f64>],
    objective: &Objective,
    samples: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut network: Network<f64> = build_network(config, seed)?;
    // nonzero biases so the side heads are not sitting at a symmetric point
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for p in network.params_mut() {
        if !p.kind.is_weight() {
            for v in p.tensor.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let refs: Vec<&Bag<f64>> = bags.iter().collect();
    let (_, grads) = loss_and_gradients(&network, &refs, objective)?;
    let total: usize = network.params().iter().map(|p| p.tensor.len()).sum();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= network.params()[pi].tensor.len() {
            flat -= network.params()[pi].tensor.len();
            pi += 1;
        }
        let original = network.params()[pi].tensor.data()[flat];
        let step = 1e-6;
        let mut at = |v: f64| -> Result<f64> {
            network.params_mut()[pi].tensor.data_mut()[flat] = v;
            objective_value(&network, bags, objective)
        };
        let up = at(original + step)?;
        let down = at(original - step)?;
        at(original)?;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_err(grads[pi][flat], numeric));
    }
    Ok(CheckResult {
        name: format!("network({})", config.stages_text()),
        samples,
        max_rel_err: worst,
        tolerance: 1e-3,
    })
}

/// Every suite: pooling, per-op, and a tiny end-to-end network.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = vec![check_gm_pool(seed, 100)?];
    results.extend(check_ops(seed)?);
    let config = BackboneConfig::with_widths([2, 3, 4]);
    results.push(check_network(&config, &probe_bags(16, seed)?, &Objective::default(), 10, seed)?);
    Ok(results)
}
