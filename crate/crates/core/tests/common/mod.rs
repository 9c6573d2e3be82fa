//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls the library's own formulas; values are recomputed
//! from the raw channel constants or by brute force.

#![allow(dead_code)]

use cellfed_core::channel::ChannelStats;
use cellfed_core::power::PowerProblem;

/// Exponent of the leading digit via decimal formatting.
pub fn decimal_exponent(x: f64) -> i32 {
    let s = format!("{:e}", x.abs());
    s.split('e').nth(1).unwrap().parse().unwrap()
}

pub fn ten_to(u: i32) -> f64 {
    format!("1e{u}").parse().unwrap()
}

pub fn oracle_sinr(stats: &ChannelStats, p: &[f64], j: usize) -> f64 {
    let mut den = stats.i_m[j] + stats.b_bar[j] * p[j];
    for (i, &pi) in p.iter().enumerate() {
        if i != j {
            den += stats.b_tilde[j][i] * pi;
        }
    }
    stats.a_bar[j] * p[j] / den
}

pub fn oracle_rate(problem: &PowerProblem, p: &[f64], j: usize) -> f64 {
    let cfg = &problem.cfg;
    let pre_log = cfg.bandwidth_hz * (cfg.coherence_len - cfg.pilot_len) as f64
        / cfg.coherence_len as f64;
    pre_log * oracle_sinr(&problem.stats, p, j).ln_1p() / std::f64::consts::LN_2
}

pub fn oracle_latencies(problem: &PowerProblem, p: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|j| problem.bits[j] / oracle_rate(problem, p, j))
        .collect()
}

/// Central difference quotient `(r_j(p + h e_i) - r_j(p - h e_i)) / 2h`
/// evaluated without subtracting two large rates. SINR numerator and
/// denominator are affine in `p`, so the SINR difference has the exact form
/// `2h a (delta_ij D - p_j c) / (D_+ D_-)`.
pub fn rate_difference_quotient(problem: &PowerProblem, p: &[f64], j: usize, i: usize, h: f64) -> f64 {
    let stats = &problem.stats;
    let cfg = &problem.cfg;
    let pre_log = cfg.bandwidth_hz * (cfg.coherence_len - cfg.pilot_len) as f64
        / cfg.coherence_len as f64;
    let mut d = stats.i_m[j] + stats.b_bar[j] * p[j];
    for (k, &pk) in p.iter().enumerate() {
        if k != j {
            d += stats.b_tilde[j][k] * pk;
        }
    }
    let c = if i == j { stats.b_bar[j] } else { stats.b_tilde[j][i] };
    let own = if i == j { d } else { 0.0 };
    let (d_up, d_dn) = (d + h * c, d - h * c);
    let p_dn = if i == j { p[j] - h } else { p[j] };
    let s_dn = stats.a_bar[j] * p_dn / d_dn;
    let ds = 2.0 * h * stats.a_bar[j] * (own - p[j] * c) / (d_up * d_dn);
    pre_log * (ds / (1.0 + s_dn)).ln_1p() / std::f64::consts::LN_2 / (2.0 * h)
}

/// `theta_l * ell + theta_E * sum_j p_j p_u l_j(p)`.
pub fn oracle_objective(problem: &PowerProblem, p: &[f64], ell: f64) -> f64 {
    let lat = oracle_latencies(problem, p);
    let energy: f64 = p
        .iter()
        .zip(&lat)
        .map(|(pj, l)| pj * problem.cfg.max_power_w * l)
        .sum();
    problem.theta_l * ell + problem.theta_e * energy
}

/// Minimum of `F(p, max_j l_j(p))` over a uniform grid on `[p_min, 1]^M`.
pub fn grid_minimum(problem: &PowerProblem, points: usize, p_min: f64) -> (f64, Vec<f64>) {
    let m = problem.bits.len();
    assert!(m <= 3, "grid oracle is for small M");
    let axis: Vec<f64> = (0..points)
        .map(|i| p_min + (1.0 - p_min) * i as f64 / (points - 1) as f64)
        .collect();
    let mut best = (f64::INFINITY, vec![]);
    let mut idx = vec![0usize; m];
    loop {
        let p: Vec<f64> = idx.iter().map(|&i| axis[i]).collect();
        let ell = oracle_latencies(problem, &p).into_iter().fold(0.0, f64::max);
        let f = oracle_objective(problem, &p, ell);
        if f < best.0 {
            best = (f, p);
        }
        let mut c = 0;
        loop {
            if c == m {
                return best;
            }
            idx[c] += 1;
            if idx[c] < points {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
    }
}

/// Central difference of `f` along coordinate `i` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut dn = x.to_vec();
    up[i] += h;
    dn[i] -= h;
    (f(&up) - f(&dn)) / (2.0 * h)
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}
