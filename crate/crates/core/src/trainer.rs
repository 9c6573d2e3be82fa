//! Client-side local training.
//!
//! Each round a client starts from the global model, takes AdaDelta (or SGD)
//! minibatch steps, and stops at the first local step `l` with
//! `l >= l_prev` and `u_l <= u_prev`, where `u_l` is the decimal exponent of
//! the delta it would transmit. The AdaDelta accumulator is reset at the
//! start of every round.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::emq::{compute_exponent, CodecError, DeltaVector};
use crate::ml::{Dataset, Model};

pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_L_MAX: usize = 6;

/// Decimal exponent with sentinels for the zero vector and "no bound yet".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpLevel {
    NegInf,
    Finite(i32),
    PosInf,
}

impl ExpLevel {
    pub fn finite(self) -> Option<i32> {
        match self {
            ExpLevel::Finite(u) => Some(u),
            _ => None,
        }
    }
}

impl std::fmt::Display for ExpLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpLevel::NegInf => f.write_str("-inf"),
            ExpLevel::Finite(u) => write!(f, "{u}"),
            ExpLevel::PosInf => f.write_str("inf"),
        }
    }
}

/// `floor(log10 ||v||_inf)` as a level; zero maps to `NegInf` and
/// non-finite input to `PosInf`.
pub fn exponent_level(v: &[f64]) -> ExpLevel {
    match compute_exponent(v) {
        Ok(Some(u)) => ExpLevel::Finite(u),
        Ok(None) => ExpLevel::NegInf,
        Err(CodecError::ExponentOutOfRange { exponent }) => ExpLevel::Finite(exponent),
        Err(_) => ExpLevel::PosInf,
    }
}

/// Exponent of `w_l - w_ref`.
pub fn step_exponent(w_l: &[f64], w_ref: &[f64]) -> ExpLevel {
    let diff: Vec<f64> = w_l.iter().zip(w_ref).map(|(a, b)| a - b).collect();
    exponent_level(&diff)
}

pub fn stop_check(l: usize, u: ExpLevel, l_prev: usize, u_prev: ExpLevel) -> bool {
    l >= l_prev && u <= u_prev
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState {
    pub accum: Vec<f64>,
    pub rho: f64,
    pub eps: f64,
    pub alpha: f64,
}

impl AdaDeltaState {
    pub fn new(dim: usize, rho: f64, eps: f64, alpha: f64) -> Self {
        assert!((0.0..1.0).contains(&rho), "rho must lie in [0, 1)");
        assert!(eps > 0.0, "eps must be positive");
        Self {
            accum: vec![0.0; dim],
            rho,
            eps,
            alpha,
        }
    }
}

/// `E[g^2] <- rho E[g^2] + (1 - rho) g^2`, then `w -= alpha g / sqrt(E[g^2] + eps)`.
pub fn adadelta_step(state: &mut AdaDeltaState, w: &mut [f64], g: &[f64]) {
    for ((wi, ai), &gi) in w.iter_mut().zip(state.accum.iter_mut()).zip(g) {
        *ai = state.rho * *ai + (1.0 - state.rho) * gi * gi;
        *wi -= state.alpha * gi / (*ai + state.eps).sqrt();
    }
}

pub fn sgd_step(alpha: f64, w: &mut [f64], g: &[f64]) {
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi -= alpha * gi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    AdaDelta,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalSchedule {
    /// Stopping rule with `l_max` as the cap.
    #[default]
    Adaptive,
    /// Always take exactly this many local steps.
    Fixed(usize),
}

/// Which difference the stopping rule takes the exponent of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentReference {
    /// `w_l - w_global`, the vector that is quantized.
    #[default]
    Cumulative,
    /// `w_l - w_{l-1}`, the latest local step only.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub rho: f64,
    pub eps: f64,
    pub l_max: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub schedule: LocalSchedule,
    pub exponent_reference: ExponentReference,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            l_max: DEFAULT_L_MAX,
            batch_size: DEFAULT_BATCH,
            optimizer: Optimizer::AdaDelta,
            schedule: LocalSchedule::Adaptive,
            exponent_reference: ExponentReference::Cumulative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub delta_w: DeltaVector,
    pub local_iters: usize,
    /// Exponent of `delta_w`.
    pub exponent: ExpLevel,
    /// Exponent the stopping rule compared; equals `exponent` unless the
    /// per-step reference is selected.
    pub rule_exponent: ExpLevel,
    pub fell_through: bool,
    /// Mean minibatch loss over the local steps taken.
    pub train_loss: f64,
}

/// Runs one round of local updates on the samples `shard` of `data`.
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng>(
    model: &Model,
    data: &Dataset,
    shard: &[usize],
    w_global: &[f64],
    l_prev: usize,
    u_prev: ExpLevel,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> LocalResult {
    assert!(!shard.is_empty(), "empty shard");
    let (l_max, adaptive) = match cfg.schedule {
        LocalSchedule::Adaptive => (cfg.l_max, true),
        LocalSchedule::Fixed(l) => (l, false),
    };
    assert!(l_max >= 1, "need at least one local step");
    let batch = cfg.batch_size.min(shard.len()).max(1);
    let mut state = AdaDeltaState::new(w_global.len(), cfg.rho, cfg.eps, cfg.alpha);
    let mut w = w_global.to_vec();
    let mut prev = w.clone();
    let mut loss_sum = 0.0;
    let mut batch_idx = Vec::with_capacity(batch);

    let finish = |w: Vec<f64>, l: usize, rule: ExpLevel, fell: bool, loss_sum: f64| {
        let delta = DeltaVector::between(&w, w_global).expect("finite local update");
        LocalResult {
            exponent: exponent_level(delta.as_slice()),
            delta_w: delta,
            local_iters: l,
            rule_exponent: rule,
            fell_through: fell,
            train_loss: loss_sum / l as f64,
        }
    };

    for l in 1..=l_max {
        batch_idx.clear();
        batch_idx.extend(
            index::sample(rng, shard.len(), batch)
                .into_iter()
                .map(|i| shard[i]),
        );
        let (loss, g) = model.loss_and_gradient(&w, data, &batch_idx);
        loss_sum += loss;
        if cfg.exponent_reference == ExponentReference::PerStep {
            prev.copy_from_slice(&w);
        }
        match cfg.optimizer {
            Optimizer::AdaDelta => adadelta_step(&mut state, &mut w, &g),
            Optimizer::Sgd => sgd_step(cfg.alpha, &mut w, &g),
        }
        let u = match cfg.exponent_reference {
            ExponentReference::Cumulative => step_exponent(&w, w_global),
            ExponentReference::PerStep => step_exponent(&w, &prev),
        };
        if adaptive && stop_check(l, u, l_prev, u_prev) {
            return finish(w, l, u, false, loss_sum);
        }
        if l == l_max {
            return finish(w, l, u, adaptive, loss_sum);
        }
    }
    unreachable!("loop returns at l_max")
}

/// Constants of the step-size conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParams {
    /// Smoothness constant estimate.
    pub l_bar: f64,
    /// Bound on the absolute value of any gradient component.
    pub g_bound: f64,
    /// Per-coordinate local (minibatch) gradient variance.
    pub sigma_l_sq: Vec<f64>,
    /// Per-coordinate across-client gradient variance.
    pub sigma_g_sq: Vec<f64>,
    /// Largest number of local steps.
    pub big_l: f64,
    /// Planned number of global rounds.
    pub k: f64,
    pub m: f64,
    pub d: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBounds {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub sigma_k_sq: f64,
}

impl AlphaBounds {
    pub fn min(&self) -> f64 {
        self.alpha0.min(self.alpha1).min(self.alpha2)
    }
}

/// ```text
/// alpha0 = (6 L Lb^2)^(-1/2)
/// alpha1 = sqrt(M) / sqrt(K (L^2 Lb^2 d M + 6 L^3 Lb^2 d e^6))
/// alpha2 = sqrt(2 (1 - rho) / (K L^2 Lb d))
/// sigma_k^2 = max_i (sigma_l_i^2 / (G^2 (1 - rho)) + sigma_g_i^2)
/// ```
pub fn compute_alpha_bounds(p: &ConvergenceParams) -> AlphaBounds {
    let (l, lb, d, m, k) = (p.big_l, p.l_bar, p.d, p.m, p.k);
    let e6 = 6f64.exp();
    let alpha0 = (6.0 * l * lb * lb).powf(-0.5);
    let alpha1 = m.sqrt() / (k * (l * l * lb * lb * d * m + 6.0 * l.powi(3) * lb * lb * d * e6)).sqrt();
    let alpha2 = (2.0 * (1.0 - p.rho) / (k * l * l * lb * d)).sqrt();
    let g2 = p.g_bound * p.g_bound;
    let sigma_k_sq = p
        .sigma_l_sq
        .iter()
        .zip(&p.sigma_g_sq)
        .map(|(sl, sg)| sl / (g2 * (1.0 - p.rho)) + sg)
        .fold(0.0, f64::max);
    AlphaBounds {
        alpha0,
        alpha1,
        alpha2,
        sigma_k_sq,
    }
}

/// Largest observed `|grad(w1) - grad(w2)| / |w1 - w2|` over random pairs
/// drawn around `w` with Gaussian perturbations of scale `radius`.
/// This is a lower bound on the true smoothness constant.
pub fn estimate_smoothness<R: Rng>(
    grad: impl Fn(&[f64]) -> Vec<f64>,
    w: &[f64],
    pairs: usize,
    radius: f64,
    rng: &mut R,
) -> f64 {
    let perturb = |rng: &mut R| -> Vec<f64> {
        w.iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + radius * z
            })
            .collect()
    };
    let mut best = 0.0f64;
    for _ in 0..pairs {
        let a = perturb(rng);
        let b = perturb(rng);
        let num = norm_diff(&grad(&a), &grad(&b));
        let den = norm_diff(&a, &b);
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    best
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Empirical estimates of the step-size constants at `w`. Every estimate is
/// a lower bound of the constant it stands for.
#[allow(clippy::too_many_arguments)]
pub fn estimate_convergence_params<R: Rng>(
    model: &Model,
    data: &Dataset,
    shards: &[Vec<usize>],
    w: &[f64],
    n_samples: usize,
    batch_size: usize,
    big_l: usize,
    k: usize,
    rho: f64,
    rng: &mut R,
) -> ConvergenceParams {
    assert!(n_samples >= 2 && !shards.is_empty());
    let d = model.dim();
    let all: Vec<usize> = (0..data.len()).collect();
    let l_bar = estimate_smoothness(
        |x| model.loss_and_gradient(x, data, &all).1,
        w,
        n_samples,
        0.01,
        rng,
    );

    let mut g_bound = 0.0f64;
    let mut sigma_l_sq = vec![0.0f64; d];
    let mut client_grads = Vec::with_capacity(shards.len());
    for shard in shards {
        let batch = batch_size.min(shard.len()).max(1);
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for _ in 0..n_samples {
            let idx: Vec<usize> = index::sample(rng, shard.len(), batch)
                .into_iter()
                .map(|i| shard[i])
                .collect();
            let g = model.loss_and_gradient(w, data, &idx).1;
            for i in 0..d {
                g_bound = g_bound.max(g[i].abs());
                mean[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        let n = n_samples as f64;
        for i in 0..d {
            let var = (sq[i] - mean[i] * mean[i] / n) / (n - 1.0);
            sigma_l_sq[i] = sigma_l_sq[i].max(var.max(0.0));
        }
        client_grads.push(model.loss_and_gradient(w, data, shard).1);
    }
    let m = shards.len() as f64;
    let sigma_g_sq = (0..d)
        .map(|i| {
            let mean = client_grads.iter().map(|g| g[i]).sum::<f64>() / m;
            client_grads.iter().map(|g| (g[i] - mean).powi(2)).sum::<f64>() / m
        })
        .collect();

    ConvergenceParams {
        l_bar,
        g_bound,
        sigma_l_sq,
        sigma_g_sq,
        big_l: big_l as f64,
        k: k as f64,
        m,
        d: d as f64,
        rho,
    }
}
