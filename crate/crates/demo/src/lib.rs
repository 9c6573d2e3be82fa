//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain arguments and returns a JSON string; the
//! `*_json` functions are the same operations callable from Rust.

use cellfed_core::baselines::{
    fixed_bit_dequantize, fixed_bit_quantize, full_power, matched_bits_per_element,
};
use cellfed_core::channel::{build_network, uplink_rates, ChannelConfig};
use cellfed_core::emq::{
    bit_count, dequantize, encode_bits, error_bound, max_bit_count, quantize_with, DeltaVector,
    OverflowPolicy,
};
use cellfed_core::power::{solve, PowerProblem, PowerSolution, SolverOptions};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_DIM: usize = 4096;
const MAX_CLIENTS: usize = 12;
const MAX_APS: usize = 64;
const AREA_SIDE: f64 = 1000.0;
const DEMO_APS: usize = 16;

#[derive(Serialize)]
struct QuantizeView {
    exponent: Option<i32>,
    mantissas: Vec<u8>,
    negative: Vec<bool>,
    decoded: Vec<f64>,
    max_error: f64,
    bound: f64,
    bits: usize,
    bit_limit: usize,
    raw_bits: usize,
    wire: String,
    fixed_bit_width: u32,
    fixed_bit_bits: usize,
    fixed_bit_max_error: f64,
}

fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("enter at least one number".into());
    }
    if v.len() > MAX_DIM {
        return Err(format!("at most {MAX_DIM} numbers"));
    }
    Ok(v)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// EMQ code of a comma- or space-separated vector, with a fixed-bit
/// quantizer of matching payload for comparison.
pub fn quantize_json(text: &str, promote: bool) -> Result<String, String> {
    let v = parse_numbers(text)?;
    let policy = if promote {
        OverflowPolicy::Promote
    } else {
        OverflowPolicy::Clamp
    };
    let (code, _) = quantize_with(&v, policy).map_err(|e| e.to_string())?;
    let decoded = dequantize(&code).into_inner();
    let bits = bit_count(&code);
    let bound = code.wire_exponent().map_or(0.0, |u| {
        let b = error_bound(u);
        if promote {
            b.strict
        } else {
            b.relaxed
        }
    });
    let delta = DeltaVector::new(v.clone()).map_err(|e| e.to_string())?;
    let width = matched_bits_per_element(bits as f64, v.len());
    let fixed = fixed_bit_quantize(&delta, width);
    let fixed_decoded = fixed_bit_dequantize(&fixed);
    let view = QuantizeView {
        exponent: code.wire_exponent(),
        mantissas: code.mantissas().to_vec(),
        negative: v.iter().map(|x| *x < 0.0).collect(),
        max_error: max_abs_diff(&v, &decoded),
        decoded,
        bound,
        bits,
        bit_limit: max_bit_count(v.len()),
        raw_bits: 32 * v.len(),
        wire: encode_bits(&code).to_bit_string()[..bits].to_string(),
        fixed_bit_width: width,
        fixed_bit_bits: fixed.bit_count(),
        fixed_bit_max_error: max_abs_diff(delta.as_slice(), fixed_decoded.as_slice()),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Allocation {
    theta_e: f64,
    power: Vec<f64>,
    latency: Vec<f64>,
    energy: f64,
    ell_max: f64,
}

#[derive(Serialize)]
struct TradeoffView {
    sqp: Vec<Allocation>,
    full_power: Allocation,
}

fn allocation(problem: &PowerProblem, sol: &PowerSolution) -> Allocation {
    Allocation {
        theta_e: problem.theta_e,
        power: sol.p.clone(),
        latency: sol.latencies(problem),
        energy: sol.energies(problem).iter().sum(),
        ell_max: sol.ell_max,
    }
}

/// Energy/latency of SQP allocations for `theta_e` from 0 to 1 in `points`
/// steps (`theta_l = 1 - theta_e`), against full power.
pub fn tradeoff_json(
    seed: u64,
    clients: usize,
    payload_bits: f64,
    points: usize,
) -> Result<String, String> {
    if !(1..=MAX_CLIENTS).contains(&clients) {
        return Err(format!("clients must be in 1..={MAX_CLIENTS}"));
    }
    if !(2..=41).contains(&points) {
        return Err("points must be in 2..=41".into());
    }
    let cfg = ChannelConfig::default();
    let net = build_network(seed, DEMO_APS, clients, AREA_SIDE, true, &cfg);
    let bits = vec![payload_bits; clients];
    let problem_at = |theta_e: f64| {
        PowerProblem::new(net.stats.clone(), bits.clone(), cfg.clone(), theta_e, 1.0 - theta_e)
            .map_err(|e| e.to_string())
    };
    let mut sqp = Vec::with_capacity(points);
    for i in 0..points {
        let problem = problem_at(i as f64 / (points - 1) as f64)?;
        let sol = solve(&problem, &SolverOptions::default()).map_err(|e| e.to_string())?;
        sqp.push(allocation(&problem, &sol));
    }
    let problem = problem_at(0.5)?;
    let full = PowerSolution::at(&problem, full_power(clients)).map_err(|e| e.to_string())?;
    let view = TradeoffView {
        sqp,
        full_power: allocation(&problem, &full),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ChannelView {
    side: f64,
    aps: Vec<[f64; 2]>,
    clients: Vec<[f64; 2]>,
    pilots: Vec<usize>,
    /// `beta[m][j]` in dB.
    beta_db: Vec<Vec<f64>>,
    full_power_rate: Vec<f64>,
}

/// Geometry, pilots, large-scale gains and full-power rates of a network.
pub fn channel_json(seed: u64, aps: usize, clients: usize) -> Result<String, String> {
    if !(1..=MAX_APS).contains(&aps) || !(1..=MAX_CLIENTS).contains(&clients) {
        return Err(format!(
            "need 1..={MAX_APS} access points and 1..={MAX_CLIENTS} clients"
        ));
    }
    let cfg = ChannelConfig::default();
    let net = build_network(seed, aps, clients, AREA_SIDE, true, &cfg);
    let view = ChannelView {
        side: AREA_SIDE,
        aps: net.geometry.ap_positions.clone(),
        clients: net.geometry.client_positions.clone(),
        pilots: net.stats.pilot_of.clone(),
        beta_db: net
            .stats
            .beta
            .iter()
            .map(|row| row.iter().map(|b| 10.0 * b.log10()).collect())
            .collect(),
        full_power_rate: uplink_rates(&net.stats, &full_power(clients), &cfg),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn quantize(text: &str, promote: bool) -> Result<String, JsError> {
    quantize_json(text, promote).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tradeoff(seed: u32, clients: u32, payload_bits: f64, points: u32) -> Result<String, JsError> {
    tradeoff_json(u64::from(seed), clients as usize, payload_bits, points as usize)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn channel(seed: u32, aps: u32, clients: u32) -> Result<String, JsError> {
    channel_json(u64::from(seed), aps as usize, clients as usize).map_err(|e| JsError::new(&e))
}
