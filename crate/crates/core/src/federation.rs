//! The federated learning loop over the simulated uplink.
//!
//! One global round: every client trains locally from the current model,
//! the deltas are quantized, the payload sizes feed the power allocation,
//! latencies and energies are charged against the budgets, and the server
//! adds the mean dequantized delta. A full-precision shadow model that adds
//! the mean of the unquantized deltas is carried along to measure how far
//! quantization moves the trajectory.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    fixed_bit_dequantize, fixed_bit_quantize, full_power, matched_bits_per_element,
};
use crate::channel::{build_network, dbm_to_watts, uplink_rate, ChannelConfig, ChannelStats};
use crate::emq::{bit_count, dequantize, pow10, quantize_with, CodecError, DeltaVector, OverflowPolicy};
use crate::ml::{
    evaluate, generate_synthetic, load_idx_dataset, partition, DataError, Dataset, Model,
    PartitionMode, PartitionSpec,
};
use crate::power::{self, Linearization, PowerError, PowerProblem, PowerSolution, SolverOptions};
use crate::seed;
use crate::trainer::{
    local_train, ExpLevel, ExponentReference, LocalResult, LocalSchedule, Optimizer, TrainerConfig,
};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantArm {
    #[default]
    Emq,
    FixedBit,
    FullPrec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerArm {
    #[default]
    Sqp,
    FullPower,
}

/// A quantizer/power-allocation pair, written `quant+power`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Arm {
    pub quant: QuantArm,
    pub power: PowerArm,
}

impl fmt::Display for QuantArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantArm::Emq => "emq",
            QuantArm::FixedBit => "fixedbit",
            QuantArm::FullPrec => "fullprec",
        })
    }
}

impl fmt::Display for PowerArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PowerArm::Sqp => "sqp",
            PowerArm::FullPower => "fullpower",
        })
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.quant, self.power)
    }
}

impl FromStr for QuantArm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "emq" => Ok(QuantArm::Emq),
            "fixedbit" => Ok(QuantArm::FixedBit),
            "fullprec" => Ok(QuantArm::FullPrec),
            _ => Err(format!("unknown quantizer `{s}` (expected emq, fixedbit or fullprec)")),
        }
    }
}

impl FromStr for PowerArm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sqp" => Ok(PowerArm::Sqp),
            "fullpower" => Ok(PowerArm::FullPower),
            _ => Err(format!("unknown power arm `{s}` (expected sqp or fullpower)")),
        }
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (q, p) = s
            .split_once('+')
            .ok_or_else(|| format!("arm `{s}` must look like `emq+sqp`"))?;
        Ok(Arm {
            quant: q.parse()?,
            power: p.parse()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mlp,
    Logistic,
}

/// Every knob of a run. Field names are the configuration file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub clients: usize,
    pub max_rounds: usize,
    /// Total uplink energy in joules; unlimited when absent.
    pub energy_budget: Option<f64>,
    /// Total uplink latency in seconds; unlimited when absent.
    pub latency_budget: Option<f64>,
    /// Charge the payload-size report against the budgets.
    pub strict_overhead: bool,

    pub quant: QuantArm,
    pub power: PowerArm,
    pub overflow: OverflowPolicy,
    /// Per-element width of the fixed-bit arm; matched to EMQ when absent.
    pub fixed_bits: Option<u32>,
    pub theta_e: f64,
    pub theta_l: f64,
    pub linearization: Linearization,
    pub sqp_eps_x: f64,
    pub sqp_max_rounds: usize,

    pub aps: usize,
    pub area_side: f64,
    pub wrap_around: bool,
    pub antennas_per_ap: usize,
    pub bandwidth_hz: f64,
    pub coherence_len: usize,
    pub pilot_len: usize,
    pub max_power_w: f64,
    pub noise_power_dbm: f64,
    pub pathloss_exponent: f64,
    pub pathloss_intercept_db: f64,
    pub shadowing_std_db: f64,

    pub n_train: usize,
    pub n_test: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub partition: PartitionMode,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,

    pub model: ModelKind,
    pub hidden: usize,

    pub alpha: f64,
    pub rho: f64,
    pub eps: f64,
    pub l_max: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Fixed number of local steps; the adaptive rule is used when absent.
    pub local_steps: Option<usize>,
    pub exponent_reference: ExponentReference,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ch = ChannelConfig::default();
        Self {
            seed: 1,
            clients: 8,
            max_rounds: 60,
            energy_budget: None,
            latency_budget: None,
            strict_overhead: false,
            quant: QuantArm::Emq,
            power: PowerArm::Sqp,
            overflow: OverflowPolicy::Clamp,
            fixed_bits: None,
            theta_e: 0.5,
            theta_l: 0.5,
            linearization: Linearization::Full,
            sqp_eps_x: power::DEFAULT_EPS_X,
            sqp_max_rounds: power::DEFAULT_MAX_ROUNDS,
            aps: 16,
            area_side: 1000.0,
            wrap_around: true,
            antennas_per_ap: ch.antennas_per_ap,
            bandwidth_hz: ch.bandwidth_hz,
            coherence_len: ch.coherence_len,
            pilot_len: ch.pilot_len,
            max_power_w: ch.max_power_w,
            noise_power_dbm: -94.0,
            pathloss_exponent: ch.pathloss_exponent,
            pathloss_intercept_db: ch.pathloss_intercept_db,
            shadowing_std_db: ch.shadowing_std_db,
            n_train: 2400,
            n_test: 800,
            features: 16,
            classes: 4,
            separation: 3.0,
            partition: PartitionMode::Iid,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            model: ModelKind::Mlp,
            hidden: 32,
            alpha: 0.01,
            rho: crate::trainer::DEFAULT_RHO,
            eps: crate::trainer::DEFAULT_EPS,
            l_max: crate::trainer::DEFAULT_L_MAX,
            batch_size: crate::trainer::DEFAULT_BATCH,
            optimizer: Optimizer::AdaDelta,
            local_steps: None,
            exponent_reference: ExponentReference::Cumulative,
        }
    }
}

impl RunConfig {
    pub fn arm(&self) -> Arm {
        Arm {
            quant: self.quant,
            power: self.power,
        }
    }

    pub fn set_arm(&mut self, arm: Arm) {
        self.quant = arm.quant;
        self.power = arm.power;
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            antennas_per_ap: self.antennas_per_ap,
            bandwidth_hz: self.bandwidth_hz,
            coherence_len: self.coherence_len,
            pilot_len: self.pilot_len,
            max_power_w: self.max_power_w,
            noise_power_w: dbm_to_watts(self.noise_power_dbm),
            pathloss_exponent: self.pathloss_exponent,
            pathloss_intercept_db: self.pathloss_intercept_db,
            shadowing_std_db: self.shadowing_std_db,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            alpha: self.alpha,
            rho: self.rho,
            eps: self.eps,
            l_max: self.l_max,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            schedule: match self.local_steps {
                Some(l) => LocalSchedule::Fixed(l),
                None => LocalSchedule::Adaptive,
            },
            exponent_reference: self.exponent_reference,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            eps_x: self.sqp_eps_x,
            max_rounds: self.sqp_max_rounds,
            linearization: self.linearization,
            ..SolverOptions::default()
        }
    }

    pub fn budget(&self) -> Budget {
        Budget {
            energy_total: self.energy_budget.unwrap_or(f64::INFINITY),
            latency_total: self.latency_budget.unwrap_or(f64::INFINITY),
            k_max: self.max_rounds,
        }
    }

    pub fn build_model(&self) -> Model {
        match self.model {
            ModelKind::Mlp => Model::Mlp {
                features: self.features,
                hidden: self.hidden,
                classes: self.classes,
            },
            ModelKind::Logistic => Model::Logistic {
                features: self.features,
                classes: self.classes,
            },
        }
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1".into());
        }
        if self.aps == 0 {
            return bad("aps must be at least 1".into());
        }
        for (name, v) in [("theta_e", self.theta_e), ("theta_l", self.theta_l)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.theta_e == 0.0 && self.theta_l == 0.0 {
            return bad("theta_e and theta_l cannot both be zero".into());
        }
        for (name, v) in [
            ("energy_budget", self.energy_budget),
            ("latency_budget", self.latency_budget),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return bad(format!("{name} must be non-negative"));
                }
            }
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("need 0 <= rho < 1 and eps > 0".into());
        }
        if self.l_max == 0 || self.local_steps == Some(0) || self.batch_size == 0 {
            return bad("l_max, local_steps and batch_size must be at least 1".into());
        }
        if let Some(b) = self.fixed_bits {
            if !(2..=32).contains(&b) {
                return bad(format!("fixed_bits must be in 2..=32, got {b}"));
            }
        }
        if self.features == 0 || self.classes < 2 || self.hidden == 0 {
            return bad("need features >= 1, classes >= 2, hidden >= 1".into());
        }
        let idx = [
            &self.idx_train_images,
            &self.idx_train_labels,
            &self.idx_test_images,
            &self.idx_test_labels,
        ];
        let given = idx.iter().filter(|p| p.is_some()).count();
        if given != 0 && given != 4 {
            return bad("either all four idx_* paths or none must be given".into());
        }
        if given == 0 && (self.n_train == 0 || self.n_test == 0) {
            return bad("n_train and n_test must be positive".into());
        }
        self.channel_config()
            .validate()
            .map_err(|e| FederationError::Config(e.to_string()))
    }
}

/// Total energy and latency allowances and the round cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub energy_total: f64,
    pub latency_total: f64,
    pub k_max: usize,
}

/// Everything measured in one global round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub bits: Vec<usize>,
    pub local_iters: Vec<usize>,
    /// Exponent of each client's unquantized delta.
    pub exponents: Vec<ExpLevel>,
    /// Exponent each EMQ code was transmitted with.
    pub code_exponents: Vec<Option<i32>>,
    pub fell_through: Vec<bool>,
    pub power: Vec<f64>,
    pub latency: Vec<f64>,
    pub energy: Vec<f64>,
    pub ell_max: f64,
    pub sum_energy: f64,
    /// Payload-size report bits, `sum_j ceil(log2 b_j)`.
    pub bp_overhead_bits: usize,
    /// Latency and energy charged to the budgets.
    pub charged_latency: f64,
    pub charged_energy: f64,
    pub loss: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    /// `||w_k - w_k^F||_inf`.
    pub shadow_gap: f64,
    pub sqp_rounds: usize,
    pub sqp_converged: bool,
}

/// Rounds at which the budgets are first exceeded, and the number of
/// affordable rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopIndices {
    pub k_latency: usize,
    pub k_energy: usize,
    pub k: usize,
}

/// First round whose cumulative latency (energy) exceeds the budget, or
/// `k_max + 1` if none does; `K = min(min(k_l, k_E) - 1, k_max)`.
pub fn stop_indices_from(latency: &[f64], energy: &[f64], budget: &Budget) -> StopIndices {
    let first_over = |xs: &[f64], total: f64| {
        let mut cum = 0.0;
        for (i, x) in xs.iter().enumerate().take(budget.k_max) {
            cum += x;
            if cum > total {
                return i + 1;
            }
        }
        budget.k_max + 1
    };
    let k_latency = first_over(latency, budget.latency_total);
    let k_energy = first_over(energy, budget.energy_total);
    StopIndices {
        k_latency,
        k_energy,
        k: (k_latency.min(k_energy) - 1).min(budget.k_max),
    }
}

pub fn stop_indices(records: &[IterationRecord], budget: &Budget) -> StopIndices {
    let lat: Vec<f64> = records.iter().map(|r| r.charged_latency).collect();
    let en: Vec<f64> = records.iter().map(|r| r.charged_energy).collect();
    stop_indices_from(&lat, &en, budget)
}

/// `w + mean(deltas)`, summed in client order.
pub fn aggregate(w_prev: &[f64], deltas: &[DeltaVector]) -> Result<Vec<f64>, CodecError> {
    let d = w_prev.len();
    if let Some(bad) = deltas.iter().find(|v| v.dim() != d) {
        return Err(CodecError::DimensionMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    if deltas.is_empty() {
        return Ok(w_prev.to_vec());
    }
    let m = deltas.len() as f64;
    Ok((0..d)
        .map(|i| {
            let sum: f64 = deltas.iter().map(|v| v.as_slice()[i]).sum();
            w_prev[i] + sum / m
        })
        .collect())
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

fn map_clients<T: Send>(m: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..m).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..m).map(f).collect()
    }
}

/// Mutable state of a run between rounds.
pub struct Federation {
    cfg: RunConfig,
    model: Model,
    train: Dataset,
    test: Dataset,
    shards: Vec<Vec<usize>>,
    stats: ChannelStats,
    channel: ChannelConfig,
    w: Vec<f64>,
    shadow: Vec<f64>,
    l_prev: Vec<usize>,
    u_prev: Vec<ExpLevel>,
    k: usize,
}

impl Federation {
    pub fn new(cfg: RunConfig) -> Result<Self, FederationError> {
        cfg.validate()?;
        let (train, test) = load_data(&cfg)?;
        let model = cfg.build_model();
        if train.num_features() != model.features() || train.num_classes() != model.classes() {
            return Err(FederationError::Config(format!(
                "dataset has {} features / {} classes, model expects {} / {}",
                train.num_features(),
                train.num_classes(),
                model.features(),
                model.classes()
            )));
        }
        let shards = partition(&train, &PartitionSpec {
            mode: cfg.partition,
            clients: cfg.clients,
            seed: seed::derive(cfg.seed, "partition", &[]),
        })?;
        let channel = cfg.channel_config();
        let net = build_network(
            seed::derive(cfg.seed, "network", &[]),
            cfg.aps,
            cfg.clients,
            cfg.area_side,
            cfg.wrap_around,
            &channel,
        );
        let w = model.init(&mut seed::rng(cfg.seed, "init", &[]));
        Ok(Self {
            model,
            train,
            test,
            shards,
            stats: net.stats,
            channel,
            shadow: w.clone(),
            w,
            l_prev: vec![1; cfg.clients],
            u_prev: vec![ExpLevel::PosInf; cfg.clients],
            k: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn channel_stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn channel_config(&self) -> &ChannelConfig {
        &self.channel
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn round(&self) -> usize {
        self.k
    }

    /// Runs one global round and advances the state.
    pub fn global_round(&mut self) -> Result<IterationRecord, FederationError> {
        let k = self.k + 1;
        let m = self.cfg.clients;
        let tcfg = self.cfg.trainer_config();
        let (model, train, shards, w, master) =
            (&self.model, &self.train, &self.shards, &self.w, self.cfg.seed);
        let (l_prev, u_prev) = (&self.l_prev, &self.u_prev);
        let results: Vec<LocalResult> = map_clients(m, |j| {
            let mut rng = seed::rng(master, "client", &[j as u64, k as u64]);
            local_train(model, train, &shards[j], w, l_prev[j], u_prev[j], &tcfg, &mut rng)
        });

        let d = self.model.dim();
        let (transmitted, bits, code_exponents) = self.encode(&results, d)?;

        let bitsf: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
        let problem = PowerProblem::new(
            self.stats.clone(),
            bitsf,
            self.channel.clone(),
            self.cfg.theta_e,
            self.cfg.theta_l,
        )?;
        let sol = match self.cfg.power {
            PowerArm::Sqp => power::solve(&problem, &self.cfg.solver_options())?,
            PowerArm::FullPower => PowerSolution::at(&problem, full_power(m))?,
        };
        let latency = sol.latencies(&problem);
        let energy = sol.energies(&problem);
        let sum_energy: f64 = energy.iter().sum();

        let bp_bits: Vec<usize> = bits
            .iter()
            .map(|&b| (b as f64).log2().ceil() as usize)
            .collect();
        let (mut charged_latency, mut charged_energy) = (sol.ell_max, sum_energy);
        if self.cfg.strict_overhead {
            let ones = full_power(m);
            let mut worst = 0.0f64;
            for (j, &b) in bp_bits.iter().enumerate() {
                let l = b as f64 / uplink_rate(&self.stats, &ones, j, &self.channel);
                worst = worst.max(l);
                charged_energy += self.channel.max_power_w * l;
            }
            charged_latency += worst;
        }

        let unquantized: Vec<DeltaVector> = results.iter().map(|r| r.delta_w.clone()).collect();
        self.w = aggregate(&self.w, &transmitted)?;
        self.shadow = aggregate(&self.shadow, &unquantized)?;
        for (j, r) in results.iter().enumerate() {
            self.l_prev[j] = r.local_iters;
            self.u_prev[j] = r.rule_exponent;
        }
        self.k = k;

        Ok(IterationRecord {
            k,
            bits,
            local_iters: results.iter().map(|r| r.local_iters).collect(),
            exponents: results.iter().map(|r| r.exponent).collect(),
            code_exponents,
            fell_through: results.iter().map(|r| r.fell_through).collect(),
            power: sol.p.clone(),
            latency,
            energy,
            ell_max: sol.ell_max,
            sum_energy,
            bp_overhead_bits: bp_bits.iter().sum(),
            charged_latency,
            charged_energy,
            loss: self.model.loss(&self.w, &self.train),
            test_acc: evaluate(&self.model, &self.w, &self.test),
            train_loss: results.iter().map(|r| r.train_loss).sum::<f64>() / m as f64,
            shadow_gap: inf_dist(&self.w, &self.shadow),
            sqp_rounds: sol.rounds_used,
            sqp_converged: sol.converged,
        })
    }

    /// Quantizes every delta per the configured arm.
    #[allow(clippy::type_complexity)]
    fn encode(
        &self,
        results: &[LocalResult],
        d: usize,
    ) -> Result<(Vec<DeltaVector>, Vec<usize>, Vec<Option<i32>>), FederationError> {
        let m = results.len();
        match self.cfg.quant {
            QuantArm::FullPrec => Ok((
                results.iter().map(|r| r.delta_w.clone()).collect(),
                vec![32 * d; m],
                vec![None; m],
            )),
            QuantArm::Emq => {
                let mut out = Vec::with_capacity(m);
                let mut bits = Vec::with_capacity(m);
                let mut exps = Vec::with_capacity(m);
                for r in results {
                    let (code, _) = quantize_with(r.delta_w.as_slice(), self.cfg.overflow)?;
                    bits.push(bit_count(&code));
                    exps.push(code.wire_exponent());
                    out.push(dequantize(&code));
                }
                Ok((out, bits, exps))
            }
            QuantArm::FixedBit => {
                let n = match self.cfg.fixed_bits {
                    Some(n) => n,
                    None => {
                        let mut total = 0usize;
                        for r in results {
                            let (code, _) = quantize_with(r.delta_w.as_slice(), self.cfg.overflow)?;
                            total += bit_count(&code);
                        }
                        matched_bits_per_element(total as f64 / m as f64, d)
                    }
                };
                let codes: Vec<_> = results.iter().map(|r| fixed_bit_quantize(&r.delta_w, n)).collect();
                Ok((
                    codes.iter().map(fixed_bit_dequantize).collect(),
                    codes.iter().map(|c| c.bit_count()).collect(),
                    vec![None; m],
                ))
            }
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), FederationError> {
    if let (Some(ti), Some(tl), Some(vi), Some(vl)) = (
        &cfg.idx_train_images,
        &cfg.idx_train_labels,
        &cfg.idx_test_images,
        &cfg.idx_test_labels,
    ) {
        let train = load_idx_dataset(ti, tl, cfg.classes)?;
        let test = load_idx_dataset(vi, vl, cfg.classes)?;
        return Ok((train, test));
    }
    let all = generate_synthetic(
        seed::derive(cfg.seed, "data", &[]),
        cfg.n_train + cfg.n_test,
        cfg.classes,
        cfg.features,
        cfg.separation,
    );
    let train: Vec<usize> = (0..cfg.n_train).collect();
    let test: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_test).collect();
    Ok((all.subset(&train), all.subset(&test)))
}

/// Result of a run truncated to the `K` affordable rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub arm: Arm,
    /// `w_0, ..., w_K`.
    pub weights: Vec<Vec<f64>>,
    /// Full-precision shadow `w^F_0, ..., w^F_K`.
    pub shadow: Vec<Vec<f64>>,
    pub records: Vec<IterationRecord>,
    /// Every executed round, including the one that broke a budget.
    pub executed: usize,
    pub stop: StopIndices,
    pub overflow: OverflowPolicy,
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.stop.k
    }

    pub fn final_weights(&self) -> &[f64] {
        self.weights.last().expect("w_0 is always present")
    }

    /// Coefficient of the trajectory bound for the overflow policy.
    pub fn lemma2_coefficient(&self) -> f64 {
        match self.overflow {
            OverflowPolicy::Clamp => 1.0,
            OverflowPolicy::Promote => 0.5,
        }
    }

    /// `c * sum_{k' <= k} 10^{u_max(k')}` for each recorded round.
    pub fn lemma2_bounds(&self) -> Vec<f64> {
        let c = self.lemma2_coefficient();
        let mut acc = 0.0;
        self.records
            .iter()
            .map(|r| {
                if let Some(u) = r.code_exponents.iter().flatten().max() {
                    acc += pow10(*u);
                }
                c * acc
            })
            .collect()
    }

    /// Rounds violating `||w_k - w^F_k||_inf <= bound_k`.
    pub fn lemma2_violations(&self) -> Vec<usize> {
        self.records
            .iter()
            .zip(self.lemma2_bounds())
            .filter(|(r, b)| r.shadow_gap > b * (1.0 + 1e-9) + 1e-300)
            .map(|(r, _)| r.k)
            .collect()
    }

    pub fn total_bits(&self) -> usize {
        self.records.iter().flat_map(|r| &r.bits).sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.records.iter().map(|r| r.charged_energy).sum()
    }

    pub fn total_latency(&self) -> f64 {
        self.records.iter().map(|r| r.charged_latency).sum()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }

    /// Per-iteration CSV with a schema comment line and a header row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# schema={CSV_SCHEMA}")?;
        writeln!(out, "{}", CSV_COLUMNS.join(","))?;
        let (mut cum_e, mut cum_l) = (0.0, 0.0);
        for r in &self.records {
            cum_e += r.charged_energy;
            cum_l += r.charged_latency;
            let m = r.local_iters.len() as f64;
            let mean_l = r.local_iters.iter().sum::<usize>() as f64 / m;
            let max_l = r.local_iters.iter().max().copied().unwrap_or(0);
            let min_u = r.exponents.iter().min().copied().unwrap_or(ExpLevel::NegInf);
            let max_u = r.exponents.iter().max().copied().unwrap_or(ExpLevel::NegInf);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                r.loss,
                r.test_acc,
                r.bits.iter().sum::<usize>(),
                mean_l,
                max_l,
                min_u,
                max_u,
                r.ell_max,
                r.sum_energy,
                cum_e,
                cum_l,
                self.arm
            )?;
        }
        Ok(())
    }
}

pub const CSV_SCHEMA: &str = "cellfed-iterations/1";
pub const CSV_COLUMNS: [&str; 13] = [
    "k", "loss", "test_acc", "sum_bits", "mean_l", "max_l", "min_u", "max_u", "ell_max", "sum_E",
    "cum_E", "cum_L", "arm",
];

/// Runs rounds until a budget is broken or `max_rounds` is reached.
pub fn run(cfg: &RunConfig) -> Result<Trajectory, FederationError> {
    let mut fed = Federation::new(cfg.clone())?;
    let budget = cfg.budget();
    let mut weights = vec![fed.weights().to_vec()];
    let mut shadow = vec![fed.shadow().to_vec()];
    let mut records = Vec::new();
    let (mut cum_l, mut cum_e) = (0.0, 0.0);
    while records.len() < budget.k_max {
        let rec = fed.global_round()?;
        cum_l += rec.charged_latency;
        cum_e += rec.charged_energy;
        records.push(rec);
        weights.push(fed.weights().to_vec());
        shadow.push(fed.shadow().to_vec());
        if cum_l > budget.latency_total || cum_e > budget.energy_total {
            break;
        }
    }
    let executed = records.len();
    let stop = stop_indices(&records, &budget);
    records.truncate(stop.k);
    weights.truncate(stop.k + 1);
    shadow.truncate(stop.k + 1);
    Ok(Trajectory {
        arm: cfg.arm(),
        weights,
        shadow,
        records,
        executed,
        stop,
        overflow: cfg.overflow,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CFWK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header (`magic, version u32, dim u64, iteration u64`, little-endian)
/// followed by `dim` little-endian `f64` values.
pub fn write_checkpoint<W: Write>(mut out: W, w: &[f64], iteration: u64) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(w.len() as u64).to_le_bytes())?;
    out.write_all(&iteration.to_le_bytes())?;
    for x in w {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Returns `(iteration, w)`.
pub fn read_checkpoint<R: Read>(mut input: R) -> io::Result<(u64, Vec<f64>)> {
    let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("not a checkpoint file"));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != CHECKPOINT_VERSION {
        return Err(invalid("unsupported checkpoint version"));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let dim = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b8)?;
    let iteration = u64::from_le_bytes(b8);
    let mut w = Vec::with_capacity(dim);
    for _ in 0..dim {
        input.read_exact(&mut b8)?;
        w.push(f64::from_le_bytes(b8));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(invalid("trailing bytes after checkpoint data"));
    }
    Ok((iteration, w))
}
