use cellfed_demo::{channel_json, quantize_json, tradeoff_json};
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn quantize_reports_code_and_bounds() {
    let v = parse(quantize_json("0.31, -0.07 0.0\n0.96", false));
    assert_eq!(v["exponent"], -1);
    assert_eq!(v["mantissas"], serde_json::json!([3, 1, 0, 9]));
    assert_eq!(v["negative"], serde_json::json!([false, true, false, false]));
    // 8 + 4 signs + "11"+3 + "10" + "0" + "11"+3
    assert_eq!(v["bits"], 8 + 4 + 5 + 2 + 1 + 5);
    assert_eq!(v["wire"].as_str().unwrap().len(), 25);
    assert!(v["max_error"].as_f64().unwrap() <= v["bound"].as_f64().unwrap());
    assert!(v["bits"].as_u64().unwrap() <= v["bit_limit"].as_u64().unwrap());
}

#[test]
fn promote_uses_larger_exponent_on_overflow() {
    let v = parse(quantize_json("0.97, 0.2", true));
    assert_eq!(v["exponent"], 0);
    assert_eq!(v["mantissas"], serde_json::json!([1, 0]));
}

#[test]
fn quantize_rejects_bad_input() {
    assert!(quantize_json("", false).is_err());
    assert!(quantize_json("1, x", false).is_err());
    assert!(quantize_json("1, inf", false).is_err());
}

#[test]
fn tradeoff_moves_from_latency_to_energy() {
    let v = parse(tradeoff_json(7, 4, 20_000.0, 5));
    let sqp = v["sqp"].as_array().unwrap();
    assert_eq!(sqp.len(), 5);
    let energy = |i: usize| sqp[i]["energy"].as_f64().unwrap();
    let ell = |i: usize| sqp[i]["ell_max"].as_f64().unwrap();
    assert!(energy(4) <= energy(0));
    assert!(ell(0) <= ell(4));
    // Latency-only weighting is at least as fast as full power.
    assert!(ell(0) <= v["full_power"]["ell_max"].as_f64().unwrap() * (1.0 + 1e-9));
    assert!(energy(4) <= v["full_power"]["energy"].as_f64().unwrap());
}

#[test]
fn tradeoff_validates_arguments() {
    assert!(tradeoff_json(1, 0, 1e4, 5).is_err());
    assert!(tradeoff_json(1, 3, 1e4, 1).is_err());
}

#[test]
fn channel_map_shapes() {
    let v = parse(channel_json(3, 9, 5));
    assert_eq!(v["aps"].as_array().unwrap().len(), 9);
    assert_eq!(v["clients"].as_array().unwrap().len(), 5);
    assert_eq!(v["beta_db"].as_array().unwrap().len(), 9);
    assert_eq!(v["beta_db"][0].as_array().unwrap().len(), 5);
    assert!(v["full_power_rate"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r.as_f64().unwrap() > 0.0));
    assert!(channel_json(3, 0, 5).is_err());
}
