//! Reward learning from rollouts ranked by injected action noise.
//!
//! A small tanh network scores single observations. A trajectory's return is
//! the sum of its per-state scores, and the network is fit so that rollouts
//! with less noise get the higher return under a logistic pairwise loss.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Adam, AdamConfig, Dense};
use crate::seed;
use crate::trajectory::Trajectory;

pub const HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("trajectory {0} has no epsilon")]
    MissingEpsilon(String),
    #[error("no demonstrations")]
    Empty,
    #[error("need at least two distinct noise levels, got {0}")]
    InsufficientRanks(usize),
    #[error("observation has {got} features, network expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Maps a flattened observation to a scalar reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNet {
    pub layers: Vec<Dense>,
    pub seed: u64,
}

/// Activations kept for the backward pass.
struct Tape {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl RewardNet {
    pub fn new(input: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let layers = vec![
            Dense::glorot(input, HIDDEN[0], &mut rng),
            Dense::glorot(HIDDEN[0], HIDDEN[1], &mut rng),
            Dense::glorot(HIDDEN[1], 1, &mut rng),
        ];
        Self { layers, seed }
    }

    pub fn zeros(input: usize) -> Self {
        Self {
            layers: vec![
                Dense::zeros(input, HIDDEN[0]),
                Dense::zeros(HIDDEN[0], HIDDEN[1]),
                Dense::zeros(HIDDEN[1], 1),
            ],
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn run(&self, x: &[f64], rows: usize) -> Tape {
        let mut h1 = self.layers[0].forward(x, rows);
        nn::tanh_inplace(&mut h1);
        let mut h2 = self.layers[1].forward(&h1, rows);
        nn::tanh_inplace(&mut h2);
        let out = self.layers[2].forward(&h2, rows);
        Tape { h1, h2, out }
    }

    /// Per-row rewards for `rows` stacked observations.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.run(x, rows).out
    }

    pub fn reward(&self, obs: &[f64]) -> f64 {
        self.forward_batch(obs, 1)[0]
    }

    /// Adds `g * d(sum of rewards)/d(params)` into `grad`.
    fn accumulate_sum_grad(&self, x: &[f64], rows: usize, g: f64, grad: &mut [Dense]) {
        let tape = self.run(x, rows);
        let d_out = vec![g; rows];
        let d_h2 = self.layers[2].backward(&tape.h2, &d_out, rows, &mut grad[2]);
        let d_z2 = nn::tanh_backward(&tape.h2, &d_h2);
        let d_h1 = self.layers[1].backward(&tape.h1, &d_z2, rows, &mut grad[1]);
        let d_z1 = nn::tanh_backward(&tape.h1, &d_h1);
        self.layers[0].backward(x, &d_z1, rows, &mut grad[0]);
    }

    fn zero_grad(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zero_like).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Row-major observation matrix of a trajectory.
pub fn features(traj: &Trajectory) -> Vec<f64> {
    let mut x = Vec::with_capacity(traj.len() * traj.steps.first().map_or(0, |s| s.obs.flat_len()));
    for s in &traj.steps {
        s.obs.flatten_into(&mut x);
    }
    x
}

fn check_dims(net: &RewardNet, traj: &Trajectory) -> Result<(), RewardError> {
    let expected = net.input_dim();
    match traj.steps.iter().find(|s| s.obs.flat_len() != expected) {
        Some(s) => Err(RewardError::DimMismatch {
            expected,
            got: s.obs.flat_len(),
        }),
        None => Ok(()),
    }
}

/// Sum of per-state rewards over the whole trajectory.
pub fn trajectory_return(net: &RewardNet, traj: &Trajectory) -> Result<f64, RewardError> {
    check_dims(net, traj)?;
    Ok(net.forward_batch(&features(traj), traj.len()).iter().sum())
}

/// Probability that the trajectory with return `j_j` is preferred over the one with `j_i`.
pub fn preference_prob(j_i: f64, j_j: f64) -> f64 {
    nn::sigmoid(j_j - j_i)
}

/// Demonstrations sorted worst first (descending noise level).
#[derive(Debug, Clone)]
pub struct RankedDemos {
    pub items: Vec<(Trajectory, f64)>,
}

impl RankedDemos {
    pub fn distinct_levels(&self) -> usize {
        let mut n = 0;
        let mut last = None;
        for &(_, e) in &self.items {
            if last != Some(e) {
                n += 1;
                last = Some(e);
            }
        }
        n
    }

    /// All `(worse, better)` index pairs with different noise levels.
    pub fn admissible_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.items.len() {
            for j in i + 1..self.items.len() {
                if self.items[i].1 > self.items[j].1 {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter().map(|(t, _)| t)
    }
}

pub fn rank_rollouts(mut demos: Vec<(Trajectory, f64)>) -> Result<RankedDemos, RewardError> {
    if demos.is_empty() {
        return Err(RewardError::Empty);
    }
    // stable sort keeps input order within a level
    demos.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(RankedDemos { items: demos })
}

/// Ranks trajectories by the `epsilon` recorded in their metadata.
pub fn rank_by_meta(trajs: Vec<Trajectory>) -> Result<RankedDemos, RewardError> {
    let demos = trajs
        .into_iter()
        .map(|t| match t.epsilon() {
            Some(e) => Ok((t, e)),
            None => Err(RewardError::MissingEpsilon(t.id.clone())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    rank_rollouts(demos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    /// Compare random contiguous windows of this length instead of whole rollouts.
    pub snippet: Option<usize>,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_pairs: 16,
            lr: 1e-3,
            snippet: None,
            seed: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.batch_pairs == 0 {
            return Err(RewardError::InvalidConfig("batch_pairs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RewardError::InvalidConfig("lr must be positive".into()));
        }
        if self.snippet == Some(0) {
            return Err(RewardError::InvalidConfig("snippet length must be positive".into()));
        }
        Ok(())
    }
}

/// Rows `[start, start + len)` of a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Window {
    item: usize,
    start: usize,
    len: usize,
}

fn window(rows: usize, snippet: Option<usize>, item: usize, rng: &mut impl Rng) -> Window {
    match snippet {
        Some(s) if s < rows => Window {
            item,
            start: rng.random_range(0..=rows - s),
            len: s,
        },
        _ => Window { item, start: 0, len: rows },
    }
}

struct FeatureBank {
    dim: usize,
    x: Vec<Vec<f64>>,
}

impl FeatureBank {
    fn rows(&self, w: Window) -> &[f64] {
        &self.x[w.item][w.start * self.dim..(w.start + w.len) * self.dim]
    }
}

/// Logistic loss and parameter gradient for one `(worse, better)` pair.
fn pair_grad(net: &RewardNet, bank: &FeatureBank, worse: Window, better: Window) -> (f64, Vec<Dense>) {
    let j_i: f64 = net.forward_batch(bank.rows(worse), worse.len).iter().sum();
    let j_j: f64 = net.forward_batch(bank.rows(better), better.len).iter().sum();
    let p = preference_prob(j_i, j_j);
    let loss = nn::softplus(j_i - j_j);
    let mut grad = net.zero_grad();
    net.accumulate_sum_grad(bank.rows(worse), worse.len, 1.0 - p, &mut grad);
    net.accumulate_sum_grad(bank.rows(better), better.len, -(1.0 - p), &mut grad);
    (loss, grad)
}

fn flat_params(net: &RewardNet) -> Vec<f64> {
    net.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
}

fn set_param(net: &mut RewardNet, mut idx: usize, v: f64) {
    for l in &mut net.layers {
        if idx < l.w.len() {
            l.w[idx] = v;
            return;
        }
        idx -= l.w.len();
        if idx < l.b.len() {
            l.b[idx] = v;
            return;
        }
        idx -= l.b.len();
    }
}

/// Relative L2 error between the analytic pair-loss gradient and central
/// differences with step `h`, over every parameter.
pub fn pair_gradient_check(
    net: &RewardNet,
    worse: &Trajectory,
    better: &Trajectory,
    h: f64,
) -> Result<f64, RewardError> {
    check_dims(net, worse)?;
    check_dims(net, better)?;
    let bank = FeatureBank {
        dim: net.input_dim(),
        x: vec![features(worse), features(better)],
    };
    let wa = Window { item: 0, start: 0, len: worse.len() };
    let wb = Window { item: 1, start: 0, len: better.len() };
    let (_, grad) = pair_grad(net, &bank, wa, wb);
    let analytic: Vec<f64> = grad.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect();
    let base = flat_params(net);
    let mut probe = net.clone();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for i in 0..base.len() {
        set_param(&mut probe, i, base[i] + h);
        let lp = pair_grad(&probe, &bank, wa, wb).0;
        set_param(&mut probe, i, base[i] - h);
        let lm = pair_grad(&probe, &bank, wa, wb).0;
        set_param(&mut probe, i, base[i]);
        let fd = (lp - lm) / (2.0 * h);
        num += (fd - analytic[i]).powi(2);
        den += fd.powi(2).max(analytic[i].powi(2));
    }
    Ok(num.sqrt() / den.sqrt().max(1e-12))
}

/// Mean pairwise loss over `(worse, better)` index pairs of full rollouts.
pub fn pair_loss(net: &RewardNet, ranked: &RankedDemos, pairs: &[(usize, usize)]) -> f64 {
    let returns: Vec<f64> = ranked
        .items
        .par_iter()
        .map(|(t, _)| net.forward_batch(&features(t), t.len()).iter().sum())
        .collect();
    pairs
        .iter()
        .map(|&(i, j)| nn::softplus(returns[i] - returns[j]))
        .sum::<f64>()
        / pairs.len().max(1) as f64
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RewardTrainReport {
    /// Mean minibatch loss per optimizer step.
    pub losses: Vec<f64>,
}

fn sample_pair(ranked: &RankedDemos, rng: &mut impl Rng) -> (usize, usize) {
    let n = ranked.items.len();
    loop {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let (ea, eb) = (ranked.items[a].1, ranked.items[b].1);
        if ea > eb {
            return (a, b);
        }
        if eb > ea {
            return (b, a);
        }
    }
}

pub fn train_reward(
    ranked: &RankedDemos,
    cfg: &RewardConfig,
) -> Result<(RewardNet, RewardTrainReport), RewardError> {
    cfg.validate()?;
    let levels = ranked.distinct_levels();
    if levels < 2 {
        return Err(RewardError::InsufficientRanks(levels));
    }
    let dim = ranked.items[0].0.steps.first().map_or(0, |s| s.obs.flat_len());
    let mut net = RewardNet::new(dim, seed::derive(cfg.seed, "reward-init"));
    for (t, _) in &ranked.items {
        check_dims(&net, t)?;
    }
    let bank = FeatureBank {
        dim,
        x: ranked.items.par_iter().map(|(t, _)| features(t)).collect(),
    };
    let shapes: Vec<usize> = net.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &shapes);
    let mut rng = seed::rng(seed::derive(cfg.seed, "reward-pairs"));
    let mut report = RewardTrainReport::default();
    let scale = 1.0 / cfg.batch_pairs as f64;

    for step in 0..cfg.steps {
        let batch: Vec<(Window, Window)> = (0..cfg.batch_pairs)
            .map(|_| {
                let (i, j) = sample_pair(ranked, &mut rng);
                let wi = window(ranked.items[i].0.len(), cfg.snippet, i, &mut rng);
                let wj = window(ranked.items[j].0.len(), cfg.snippet, j, &mut rng);
                (wi, wj)
            })
            .collect();
        let results: Vec<(f64, Vec<Dense>)> =
            batch.par_iter().map(|&(wi, wj)| pair_grad(&net, &bank, wi, wj)).collect();
        // fixed-order reduction
        let mut total = net.zero_grad();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            for (acc, part) in total.iter_mut().zip(g) {
                for (a, b) in acc.w.iter_mut().zip(&part.w) {
                    *a += b * scale;
                }
                for (a, b) in acc.b.iter_mut().zip(&part.b) {
                    *a += b * scale;
                }
            }
        }
        report.losses.push(loss * scale);
        let grads: Vec<&[f64]> = total.iter().flat_map(|g| g.params()).collect();
        let params: Vec<&mut Vec<f64>> = net.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        opt.step(params, grads);
        if step % 500 == 0 {
            log::debug!("reward step {step} loss {:.4}", loss * scale);
        }
    }
    if !net.is_finite() {
        return Err(RewardError::InvalidConfig("training diverged".into()));
    }
    Ok((net, report))
}

/// Fills every step's reward with the network's estimate.
pub fn annotate_rewards(net: &RewardNet, trajs: &mut [Trajectory]) -> Result<(), RewardError> {
    for t in trajs.iter() {
        check_dims(net, t)?;
    }
    trajs.par_iter_mut().for_each(|t| {
        let r = net.forward_batch(&features(t), t.len());
        for (s, r) in t.steps.iter_mut().zip(r) {
            s.reward = Some(r);
        }
    });
    Ok(())
}

/// Fraction of admissible pairs whose return ordering agrees with the noise ordering.
pub fn ranking_accuracy(returns: &[f64], epsilons: &[f64]) -> f64 {
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..returns.len() {
        for j in i + 1..returns.len() {
            if epsilons[i] == epsilons[j] {
                continue;
            }
            total += 1;
            let better_is_j = epsilons[j] < epsilons[i];
            if (returns[j] > returns[i]) == better_is_j && returns[i] != returns[j] {
                agree += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

/// Kendall's tau-b between two score sequences.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = (a[i] - a[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let db = (b[i] - b[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            match (da, db) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((conc + disc + ties_a) * (conc + disc + ties_b)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (conc - disc) as f64 / denom
    }
}
