//! Adam optimization of the full objective.
//!
//! Every bag is run through its own tape; per-bag gradients are summed in
//! bag order so results do not depend on how many worker threads ran.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::backbone::{Network, SideOutputs};
use crate::error::{Error, Result};
use crate::objective::{bag_loss, record_bag_objective, Bag, LossBreakdown, Objective};
use crate::scalar::{flush_subnormals, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Every bag in every iteration.
    Full,
    /// Shuffled minibatches of the given size.
    Minibatch(usize),
}

/// Early stop when the total loss changed by less than `tolerance`
/// (relative) over the last `window` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub window: usize,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier on the learning rate of side-output heads.
    pub side_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_mode: BatchMode,
    pub objective: Objective,
    pub plateau: Option<Plateau>,
    pub seed: u64,
    /// Worker threads for per-bag gradients; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            side_lr_scale: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
            iterations: 1000,
            batch_mode: BatchMode::Full,
            objective: Objective::default(),
            plateau: Some(Plateau {
                window: 50,
                tolerance: 1e-5,
            }),
            seed: 0,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.side_lr_scale) {
            return Err(Error::invalid(format!("side lr scale {} outside [0, 1]", self.side_lr_scale)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("epsilon must be positive and weight decay nonnegative"));
        }
        if let BatchMode::Minibatch(0) = self.batch_mode {
            return Err(Error::invalid("minibatch size must be positive"));
        }
        if !(self.objective.r >= 1.0) {
            return Err(Error::invalid(format!("pooling r = {} must be >= 1", self.objective.r)));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("thread count must be positive"));
        }
        self.objective.weights.validate()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Loss at the start of each completed iteration.
    pub entries: Vec<LossBreakdown>,
    pub wall_time: Duration,
    pub checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_tsv(&self, sides: usize) -> String {
        let mut s = format!("iteration\t{}\n", LossBreakdown::tsv_header(sides));
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}", e.tsv_row());
        }
        s
    }

    pub fn write_tsv(&self, sides: usize, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv(sides)).map_err(|e| Error::io(path, e))
    }
}

/// First/second moment estimates of one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update with an additive `lr * wd * param` decay term.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {}, grad {}, moments {}/{}",
                param.len(),
                grad.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * p.as_f64();
        *p -= S::from_f64_lossy(lr * update);
    }
    Ok(())
}

/// Loss terms and summed parameter gradients over `bags`.
pub fn loss_and_gradients<S: Scalar>(
    network: &Network<S>,
    bags: &[&Bag<S>],
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<Vec<S>>)> {
    let per_bag: Vec<(LossBreakdown, Vec<Vec<S>>)> = bags
        .par_iter()
        .map(|bag| bag_gradients(network, bag, objective))
        .collect::<Result<_>>()?;
    let mut total = LossBreakdown::default();
    let mut grads: Vec<Vec<S>> = network.params().iter().map(|p| vec![S::zero(); p.tensor.len()]).collect();
    for (b, g) in &per_bag {
        total.accumulate(b);
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, &v) in acc.iter_mut().zip(gi) {
                *a += v;
            }
        }
    }
    Ok((total, grads))
}

fn bag_gradients<S: Scalar>(
    network: &Network<S>,
    bag: &Bag<S>,
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<Vec<S>>)> {
    flush_subnormals(|| bag_gradients_inner(network, bag, objective))
}

fn bag_gradients_inner<S: Scalar>(
    network: &Network<S>,
    bag: &Bag<S>,
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let params = network.bind(&mut tape, true);
    let input = network.bind_image(&mut tape, bag.image())?;
    let (vars, native_sizes) = network.forward_on_tape(&mut tape, &params, input)?;
    let outputs = SideOutputs {
        side_maps: vars.sides.iter().map(|&v| tape.value(v).clone()).collect(),
        fused_map: tape.value(vars.fused).clone(),
        native_sizes,
        fusion_layer: vars.fusion_layer(),
    };
    if !outputs.fused_map.is_finite() || !outputs.side_maps.iter().all(Tensor::is_finite) {
        // the caller knows the iteration and fills it in
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let breakdown = bag_loss(bag, &outputs, objective)?;
    let loss = record_bag_objective(&mut tape, &vars, bag, objective)?;
    let mut g = tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(network.params())
        .map(|(&v, p)| {
            g.take(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![S::zero(); p.tensor.len()])
        })
        .collect();
    Ok((breakdown, grads))
}

pub fn train<S: Scalar>(network: &mut Network<S>, bags: &[Bag<S>], config: &TrainConfig) -> Result<TrainLog> {
    train_with_observer(network, bags, config, |_, _| {})
}

/// [`train`] with a callback after every iteration (index, loss before the update).
pub fn train_with_observer<S: Scalar>(
    network: &mut Network<S>,
    bags: &[Bag<S>],
    config: &TrainConfig,
    observer: impl FnMut(usize, &LossBreakdown) + Send,
) -> Result<TrainLog> {
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::invalid("training needs at least one bag"));
    }
    if config.objective.weights.eta_side.len() != network.config().side_count() {
        return Err(Error::invalid(format!(
            "{} side loss weights for {} side outputs",
            config.objective.weights.eta_side.len(),
            network.config().side_count()
        )));
    }
    let positives = bags.iter().filter(|b| b.is_positive()).count();
    if positives == 0 || positives == bags.len() {
        log::warn!("training set has {positives} positive and {} negative bags", bags.len() - positives);
    }
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| run(network, bags, config, observer)),
        None => run(network, bags, config, observer),
    }
}

fn run<S: Scalar>(
    network: &mut Network<S>,
    bags: &[Bag<S>],
    config: &TrainConfig,
    mut observer: impl FnMut(usize, &LossBreakdown) + Send,
) -> Result<TrainLog> {
    let start = Instant::now();
    let mut states: Vec<AdamState> = network.params().iter().map(|p| AdamState::new(p.tensor.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();

    for iteration in 0..config.iterations {
        let batch: Vec<&Bag<S>> = match config.batch_mode {
            BatchMode::Full => bags.iter().collect(),
            BatchMode::Minibatch(size) => {
                let size = size.min(bags.len());
                if cursor + size > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let picked = order[cursor..cursor + size].iter().map(|&i| &bags[i]).collect();
                cursor += size;
                picked
            }
        };
        let (breakdown, grads) = loss_and_gradients(network, &batch, &config.objective).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration },
            other => other,
        })?;
        if !breakdown.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration });
        }
        for ((param, grad), state) in network.params_mut().iter_mut().zip(&grads).zip(&mut states) {
            let lr = if param.kind.is_side() {
                config.learning_rate * config.side_lr_scale
            } else {
                config.learning_rate
            };
            let wd = if param.kind.is_weight() { config.weight_decay } else { 0.0 };
            adam_step(
                param.tensor.data_mut(),
                grad,
                state,
                lr,
                config.beta1,
                config.beta2,
                config.epsilon,
                wd,
            )?;
        }
        observer(iteration, &breakdown);
        log.entries.push(breakdown);

        if let (Some(p), BatchMode::Full) = (config.plateau, config.batch_mode) {
            let n = log.entries.len();
            if p.window > 0 && n > p.window {
                let (old, new) = (log.entries[n - 1 - p.window].total, log.entries[n - 1].total);
                if ((old - new) / old.abs().max(f64::MIN_POSITIVE)).abs() < p.tolerance {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    log.wall_time = start.elapsed();
    Ok(log)
}
