//! Cell-free massive MIMO uplink model.
//!
//! APs sit on a regular grid, clients are dropped uniformly at random, and
//! large-scale fading follows a log-distance pathloss law. From the
//! large-scale gains and the pilot assignment we compute the per-client
//! constants that define the maximum-ratio uplink SINR
//!
//! ```text
//! SINR_j = A_j p_j / (B_j p_j + sum_{i != j} p_i Bt_j^i + I_j)
//! r_j    = B (1 - tau_p / tau_c) log2(1 + SINR_j)
//! ```
//!
//! Everything here works on statistics; no fading realisations are drawn.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error("inconsistent channel statistics: {0}")]
    InvalidStats(String),
}

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub antennas_per_ap: usize,
    pub bandwidth_hz: f64,
    pub coherence_len: usize,
    pub pilot_len: usize,
    /// Maximum uplink transmit power `p^u` in watts.
    pub max_power_w: f64,
    /// Receiver noise power in watts, noise figure included.
    pub noise_power_w: f64,
    pub pathloss_exponent: f64,
    /// Pathloss at the 1 m reference distance, in dB.
    pub pathloss_intercept_db: f64,
    /// Log-normal shadowing standard deviation in dB; 0 disables it.
    pub shadowing_std_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            antennas_per_ap: 4,
            bandwidth_hz: 20e6,
            coherence_len: 200,
            pilot_len: 10,
            max_power_w: 0.1,
            noise_power_w: dbm_to_watts(-94.0),
            pathloss_exponent: 3.67,
            pathloss_intercept_db: 30.5,
            shadowing_std_db: 0.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::InvalidConfig(m.to_string()));
        if self.antennas_per_ap == 0 {
            return bad("antennas_per_ap must be at least 1");
        }
        if self.pilot_len == 0 || self.pilot_len >= self.coherence_len {
            return bad("need 0 < pilot_len < coherence_len");
        }
        if !(self.max_power_w > 0.0) || !(self.noise_power_w > 0.0) {
            return bad("max_power_w and noise_power_w must be positive");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth_hz must be positive");
        }
        if self.shadowing_std_db < 0.0 {
            return bad("shadowing_std_db must be non-negative");
        }
        Ok(())
    }

    /// Pre-log bandwidth `B (1 - tau_p / tau_c)`.
    pub fn effective_bandwidth(&self) -> f64 {
        self.bandwidth_hz * (1.0 - self.pilot_len as f64 / self.coherence_len as f64)
    }

    /// Pilot energy `tau_p p^u`.
    pub fn pilot_power(&self) -> f64 {
        self.pilot_len as f64 * self.max_power_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGeometry {
    pub ap_positions: Vec<[f64; 2]>,
    pub client_positions: Vec<[f64; 2]>,
    pub area_side: f64,
    pub wrap_around: bool,
}

impl NetworkGeometry {
    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn num_clients(&self) -> usize {
        self.client_positions.len()
    }

    /// Euclidean or torus distance, floored at 1 m.
    pub fn distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let axis = |x: f64, y: f64| {
            let d = (x - y).abs();
            if self.wrap_around {
                d.min(self.area_side - d)
            } else {
                d
            }
        };
        axis(a[0], b[0]).hypot(axis(a[1], b[1])).max(1.0)
    }
}

/// APs on the first `aps` cells of a `ceil(sqrt(aps))` square grid (cell
/// centres); clients uniform over the square, seeded.
pub fn generate_geometry(
    master_seed: u64,
    aps: usize,
    clients: usize,
    area_side: f64,
    wrap_around: bool,
) -> NetworkGeometry {
    assert!(aps >= 1 && clients >= 1, "need at least one AP and one client");
    let g = (aps as f64).sqrt().ceil() as usize;
    let cell = area_side / g as f64;
    let ap_positions = (0..aps)
        .map(|i| {
            let (row, col) = (i / g, i % g);
            [(col as f64 + 0.5) * cell, (row as f64 + 0.5) * cell]
        })
        .collect();
    let mut rng = seed::rng(master_seed, "geometry", &[]);
    let client_positions = (0..clients)
        .map(|_| {
            [
                rng.random::<f64>() * area_side,
                rng.random::<f64>() * area_side,
            ]
        })
        .collect();
    NetworkGeometry {
        ap_positions,
        client_positions,
        area_side,
        wrap_around,
    }
}

/// Large-scale gains `beta[m][j]` (linear) between AP `m` and client `j`.
pub fn compute_large_scale(geom: &NetworkGeometry, cfg: &ChannelConfig) -> Vec<Vec<f64>> {
    geom.ap_positions
        .iter()
        .map(|&ap| {
            geom.client_positions
                .iter()
                .map(|&c| {
                    let d = geom.distance(ap, c);
                    let db = -cfg.pathloss_intercept_db - 10.0 * cfg.pathloss_exponent * d.log10();
                    10f64.powf(db / 10.0)
                })
                .collect()
        })
        .collect()
}

/// Multiplies every gain by an independent log-normal shadowing term.
pub fn apply_shadowing(beta: &mut [Vec<f64>], std_db: f64, master_seed: u64) {
    if std_db == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std_db).expect("finite std");
    let mut rng = seed::rng(master_seed, "shadowing", &[]);
    for row in beta.iter_mut() {
        for b in row.iter_mut() {
            *b *= 10f64.powf(normal.sample(&mut rng) / 10.0);
        }
    }
}

/// Round-robin pilot reuse: client `j` gets pilot `j mod tau_p`.
pub fn assign_pilots(clients: usize, pilot_len: usize) -> Vec<usize> {
    assert!(pilot_len >= 1);
    (0..clients).map(|j| j % pilot_len).collect()
}

/// Large-scale constants of the closed-form uplink SINR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// `beta[m][j]`; empty when the stats were loaded without geometry.
    #[serde(default)]
    pub beta: Vec<Vec<f64>>,
    /// `gamma[m][j]`, mean-square of the channel estimate.
    #[serde(default)]
    pub gamma: Vec<Vec<f64>>,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    /// `b_tilde[j][i]`: interference from client `i` onto client `j`.
    /// The diagonal is unused.
    pub b_tilde: Vec<Vec<f64>>,
    pub i_m: Vec<f64>,
    #[serde(default)]
    pub pilot_of: Vec<usize>,
}

impl ChannelStats {
    /// Builds stats directly from the SINR constants.
    pub fn from_constants(
        a_bar: Vec<f64>,
        b_bar: Vec<f64>,
        b_tilde: Vec<Vec<f64>>,
        i_m: Vec<f64>,
    ) -> Result<Self, ChannelError> {
        let s = Self {
            beta: Vec::new(),
            gamma: Vec::new(),
            a_bar,
            b_bar,
            b_tilde,
            i_m,
            pilot_of: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_clients(&self) -> usize {
        self.a_bar.len()
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let m = self.a_bar.len();
        let bad = |msg: String| Err(ChannelError::InvalidStats(msg));
        if m == 0 {
            return bad("no clients".into());
        }
        if self.b_bar.len() != m || self.i_m.len() != m || self.b_tilde.len() != m {
            return bad(format!("vectors must all have length {m}"));
        }
        if self.b_tilde.iter().any(|row| row.len() != m) {
            return bad(format!("b_tilde must be {m}x{m}"));
        }
        let all = self
            .a_bar
            .iter()
            .chain(&self.b_bar)
            .chain(&self.i_m)
            .chain(self.b_tilde.iter().flatten());
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return bad(format!("entry {v} is not a finite non-negative number"));
            }
        }
        if self.i_m.contains(&0.0) {
            return bad("noise term I_M must be positive".into());
        }
        Ok(())
    }

    fn denominator(&self, p: &[f64], j: usize) -> f64 {
        let interference: f64 = p
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(i, &pi)| pi * self.b_tilde[j][i])
            .sum();
        self.b_bar[j] * p[j] + interference + self.i_m[j]
    }
}

/// Evaluates the closed-form constants for a gain matrix and pilot plan.
pub fn compute_channel_stats(
    beta: &[Vec<f64>],
    pilot_of: &[usize],
    cfg: &ChannelConfig,
) -> ChannelStats {
    let aps = beta.len();
    let m = pilot_of.len();
    let n = cfg.antennas_per_ap as f64;
    let pp = cfg.pilot_power();
    let sigma2 = cfg.noise_power_w;
    let shares = |a: usize, b: usize| pilot_of[a] == pilot_of[b];

    let gamma: Vec<Vec<f64>> = (0..aps)
        .map(|ap| {
            (0..m)
                .map(|j| {
                    let contaminated: f64 = (0..m)
                        .filter(|&i| shares(i, j))
                        .map(|i| beta[ap][i])
                        .sum();
                    pp * beta[ap][j] * beta[ap][j] / (pp * contaminated + sigma2)
                })
                .collect()
        })
        .collect();

    let col_sum = |f: &dyn Fn(usize) -> f64| (0..aps).map(f).sum::<f64>();
    let mut a_bar = vec![0.0; m];
    let mut b_bar = vec![0.0; m];
    let mut i_m = vec![0.0; m];
    let mut b_tilde = vec![vec![0.0; m]; m];
    for j in 0..m {
        a_bar[j] = col_sum(&|ap| n * gamma[ap][j]).powi(2);
        b_bar[j] = col_sum(&|ap| n * gamma[ap][j] * beta[ap][j]);
        i_m[j] = col_sum(&|ap| n * sigma2 * gamma[ap][j] / cfg.max_power_w);
        for i in 0..m {
            if i == j {
                continue;
            }
            let mut v = col_sum(&|ap| n * gamma[ap][j] * beta[ap][i]);
            if shares(i, j) {
                let coherent = col_sum(&|ap| {
                    if beta[ap][j] > 0.0 {
                        n * gamma[ap][j] * beta[ap][i] / beta[ap][j]
                    } else {
                        0.0
                    }
                });
                v += coherent * coherent;
            }
            b_tilde[j][i] = v;
        }
    }
    ChannelStats {
        beta: beta.to_vec(),
        gamma,
        a_bar,
        b_bar,
        b_tilde,
        i_m,
        pilot_of: pilot_of.to_vec(),
    }
}

/// Geometry plus statistics for one seeded network drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub geometry: NetworkGeometry,
    pub stats: ChannelStats,
}

pub fn build_network(
    master_seed: u64,
    aps: usize,
    clients: usize,
    area_side: f64,
    wrap_around: bool,
    cfg: &ChannelConfig,
) -> Network {
    let geometry = generate_geometry(master_seed, aps, clients, area_side, wrap_around);
    let mut beta = compute_large_scale(&geometry, cfg);
    apply_shadowing(&mut beta, cfg.shadowing_std_db, master_seed);
    let pilots = assign_pilots(clients, cfg.pilot_len);
    let stats = compute_channel_stats(&beta, &pilots, cfg);
    Network { geometry, stats }
}

pub fn sinr(stats: &ChannelStats, p: &[f64], j: usize) -> f64 {
    stats.a_bar[j] * p[j] / stats.denominator(p, j)
}

/// Achievable uplink rate of client `j` in bit/s.
pub fn uplink_rate(stats: &ChannelStats, p: &[f64], j: usize, cfg: &ChannelConfig) -> f64 {
    cfg.effective_bandwidth() * sinr(stats, p, j).ln_1p() / std::f64::consts::LN_2
}

pub fn uplink_rates(stats: &ChannelStats, p: &[f64], cfg: &ChannelConfig) -> Vec<f64> {
    (0..stats.num_clients())
        .map(|j| uplink_rate(stats, p, j, cfg))
        .collect()
}

/// `jac[j][i] = d r_j / d p_i`.
pub fn rate_jacobian(stats: &ChannelStats, p: &[f64], cfg: &ChannelConfig) -> Vec<Vec<f64>> {
    let m = stats.num_clients();
    let scale = cfg.effective_bandwidth() / std::f64::consts::LN_2;
    (0..m)
        .map(|j| {
            let den = stats.denominator(p, j);
            let s = stats.a_bar[j] * p[j] / den;
            let outer = scale / (1.0 + s);
            (0..m)
                .map(|i| {
                    let ds = if i == j {
                        stats.a_bar[j] * (den - p[j] * stats.b_bar[j]) / (den * den)
                    } else {
                        -stats.a_bar[j] * p[j] * stats.b_tilde[j][i] / (den * den)
                    };
                    outer * ds
                })
                .collect()
        })
        .collect()
}
