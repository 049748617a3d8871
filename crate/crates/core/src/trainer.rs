//! Training loop, losses and repeated-run statistics.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // Float math is inherent on std targets only.
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{check_fractions, make_splits, Dataset, Role, SplitMask};
use crate::dgm::{graph_reward_loss, SamplerMode, TapeSample};
use crate::gnn::{forward, InitOptions, ModelParams, ModelSpec};
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Adam {
            lr,
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub n_runs: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    /// Weight of the graph reward loss.
    pub graph_loss_weight: f64,
    /// Decay of the per-node accuracy baseline.
    pub baseline_decay: f64,
    pub init: InitOptions,
}

impl TrainConfig {
    /// 300 epochs of Adam at `1e-2`, one run, a 60/20/20 split.
    pub fn new(model: ModelSpec) -> Self {
        TrainConfig {
            model,
            epochs: 300,
            learning_rate: 1e-2,
            adam: AdamConfig::default(),
            seed: 0,
            n_runs: 1,
            splits: [0.6, 0.2, 0.2],
            graph_loss_weight: 1.0,
            baseline_decay: 0.9,
            init: InitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fractions(self.splits)?;
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline decay must lie in [0, 1)".into()));
        }
        if !(self.graph_loss_weight >= 0.0) {
            return Err(Error::Config("graph loss weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-epoch trajectory of one training run.
///
/// Entry `e` of every trajectory describes the parameters after `e` updates,
/// so each has `epochs + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Curvature of every signature component.
    pub curvatures: Vec<Vec<f64>>,
    pub temperatures: Vec<f64>,
    /// Fraction of sampled latent edges joining nodes with equal labels.
    pub latent_homophily: Vec<f64>,
    /// Epoch with the best validation accuracy (first one on ties).
    pub best_epoch: usize,
    pub test_acc: f64,
}

impl RunMetrics {
    pub fn final_curvatures(&self) -> &[f64] {
        &self.curvatures[self.best_epoch]
    }

    pub fn final_temperature(&self) -> Option<f64> {
        self.temperatures.get(self.best_epoch).copied()
    }
}

/// Mean NLL over `train` plus `graph_weight` times the graph reward loss.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    log_probs: NodeId,
    labels: &[usize],
    train: &[usize],
    samples: &[&TapeSample],
    correct: &[bool],
    baseline: &[f64],
    graph_weight: f64,
) -> Result<NodeId> {
    let (n, c) = tape.value(log_probs).dims2();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if train.is_empty() {
        return Err(Error::Split("no training nodes".into()));
    }
    let mut index = Vec::with_capacity(train.len());
    for &i in train {
        let l = labels[i];
        if l >= c {
            return Err(Error::Data(format!("label {l} of node {i} is outside 0..{c}")));
        }
        index.push((i, l));
    }
    let picked = tape.gather(log_probs, index)?;
    let mean = tape.mean(picked)?;
    let nll = tape.neg(mean)?;
    if samples.is_empty() || graph_weight == 0.0 {
        return Ok(nll);
    }
    let reward = graph_reward_loss(tape, samples, train, correct, baseline)?;
    let weighted = tape.scale(reward, graph_weight)?;
    tape.add(nll, weighted)
}

fn predictions(log_probs: &Tensor) -> Vec<usize> {
    (0..log_probs.rows())
        .map(|i| {
            let row = log_probs.row_slice(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

fn accuracy(correct: &[bool], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    nodes.iter().filter(|&&i| correct[i]).count() as f64 / nodes.len() as f64
}

fn check_scalars(params: &ModelParams) -> Result<()> {
    if let Some(l) = &params.spec.latent {
        for (c, k) in l.signature.components().iter().zip(params.curvatures()) {
            c.kind.check_curvature(k)?;
        }
    }
    if let Some(t) = params.temperature() {
        if !(t > 0.0) {
            return Err(Error::Config(format!("temperature {t} is not positive")));
        }
    }
    Ok(())
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Trains one model with `config.seed` and returns the best-validation
/// parameters with the run's trajectory.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(ModelParams, RunMetrics)> {
    config.validate()?;
    let splits = make_splits(data.n(), config.splits, data.labels(), config.seed)?;
    train_with_splits(config, data, &splits)
}

/// [`train`] on a caller-provided split.
pub fn train_with_splits(
    config: &TrainConfig,
    data: &Dataset,
    splits: &SplitMask,
) -> Result<(ModelParams, RunMetrics)> {
    config.validate()?;
    if splits.roles().len() != data.n() {
        return Err(Error::Dimension {
            expected: data.n(),
            got: splits.roles().len(),
        });
    }
    let input = data.input_adjacency();
    if config.model.needs_input_graph() && input.is_none() {
        return Err(Error::Config(format!(
            "{} needs an input graph but dataset {:?} has none",
            config.model, data.name
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(1);
    let mut params = ModelParams::init(
        &config.model,
        data.n_features(),
        data.n_classes,
        &config.init,
        &mut init_rng,
    )?;

    let (train_idx, val_idx, test_idx) = (
        splits.indices(Role::Train),
        splits.indices(Role::Val),
        splits.indices(Role::Test),
    );
    let labels = data.labels();
    let mut baseline = vec![data.chance_accuracy(); data.n()];
    let mut adam = Adam::new(params.n_params(), config.learning_rate, config.adam);
    let mut metrics = RunMetrics {
        train_loss: Vec::with_capacity(config.epochs + 1),
        train_acc: Vec::with_capacity(config.epochs + 1),
        val_acc: Vec::with_capacity(config.epochs + 1),
        curvatures: Vec::with_capacity(config.epochs + 1),
        temperatures: Vec::new(),
        latent_homophily: Vec::new(),
        best_epoch: 0,
        test_acc: 0.0,
    };
    let mut best = (f64::NEG_INFINITY, params.clone());

    for epoch in 0..=config.epochs {
        check_scalars(&params)?;
        metrics.curvatures.push(params.curvatures());
        if let Some(t) = params.temperature() {
            metrics.temperatures.push(t);
        }

        let mut tape = Tape::new();
        let nodes = params.leaves(&mut tape);
        let out = forward(
            &mut tape,
            &params,
            &nodes,
            data.features(),
            input.as_ref(),
            SamplerMode::Gumbel,
            &mut sample_rng,
        )
        .map_err(|e| diverged(e, epoch))?;
        let preds = predictions(tape.value(out.log_probs));
        let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, l)| p == l).collect();
        let samples: Vec<&TapeSample> = out.samples.iter().collect();
        if let Some(s) = samples.first() {
            let (same, total) = s.sample.edges().fold((0usize, 0usize), |(a, b), (i, j)| {
                (a + usize::from(labels[i] == labels[j]), b + 1)
            });
            metrics.latent_homophily.push(same as f64 / total as f64);
        }
        let loss = total_loss(
            &mut tape,
            out.log_probs,
            labels,
            &train_idx,
            &samples,
            &correct,
            &baseline,
            config.graph_loss_weight,
        )
        .map_err(|e| diverged(e, epoch))?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        metrics.train_loss.push(loss_value);
        metrics.train_acc.push(accuracy(&correct, &train_idx));
        let val = accuracy(&correct, &val_idx);
        metrics.val_acc.push(val);
        if val > best.0 {
            best = (val, params.clone());
            metrics.best_epoch = epoch;
            metrics.test_acc = accuracy(&correct, &test_idx);
        }

        for (b, &c) in baseline.iter_mut().zip(&correct) {
            *b = config.baseline_decay * *b + (1.0 - config.baseline_decay) * f64::from(u8::from(c));
        }
        if epoch == config.epochs {
            break;
        }
        let grads = tape.backward(loss).map_err(|e| diverged(e, epoch))?;
        let flat_grad: Vec<f64> = nodes.iter().flat_map(|&id| grads.get(id).into_data()).collect();
        if flat_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let mut flat = params.flatten();
        adam.step(&mut flat, &flat_grad);
        params.set_flat(&flat)?;
    }
    Ok((best.1, metrics))
}

/// Test accuracies of `n_runs` trainings with seeds `seed, seed + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: Vec<RunMetrics>,
}

/// Sample mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    // Shifted by the first value so that constant inputs give an exact mean.
    let x0 = xs.first().copied().unwrap_or(0.0);
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Repeats [`train`] with a fresh split and initialisation per run.
pub fn repeat_runs(config: &TrainConfig, data: &Dataset) -> Result<RepeatSummary> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.n_runs);
    for r in 0..config.n_runs {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..config.clone()
        };
        let (_, m) = train(&cfg, data).map_err(|e| Error::Run {
            run: r,
            source: Box::new(e),
        })?;
        runs.push(m);
    }
    let accs: Vec<f64> = runs.iter().map(|m| m.test_acc).collect();
    let (mean, std) = mean_std(&accs);
    Ok(RepeatSummary { mean, std, runs })
}
