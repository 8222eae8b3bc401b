//! WebAssembly bindings for the browser demo in `www/`. Each export takes a
//! model as JSON (`{d, p, q, a, b, gamma, delta}`, matrices row by row) and
//! returns JSON.

use arxtrack::commands;
use arxtrack::config::ModelSection;
use arxtrack::mc::{self, EnsembleConfig};
use arxtrack::sim::{self, SimConfig};
use arxtrack::{ArxModel, WeightMode};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn parse_model(model_json: &str) -> Result<ArxModel, String> {
    let section: ModelSection = serde_json::from_str(model_json).map_err(|e| format!("model JSON: {e}"))?;
    section.build().map_err(|e| e.to_string())
}

fn mode(wls: bool) -> WeightMode {
    if wls {
        WeightMode::Wls { gamma: 1.0 }
    } else {
        WeightMode::Ls
    }
}

/// `H`, `K`, `L`, `Λ`, `S`, `Λ⁻¹`, `det Λ` and the cross-check.
pub fn limit_matrix_json(model_json: &str) -> Result<String, String> {
    let model = parse_model(model_json)?;
    let (_, _, report) = commands::limit_report(&model, String::new()).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Paths {
    step: Vec<u64>,
    /// `x[i][t]`: coordinate `i` of `X` at step `t`.
    x: Vec<Vec<f64>>,
    theta_error: Vec<f64>,
    /// `tr(C_n − Δ_n)`.
    cost_gap: Vec<f64>,
}

/// State, estimation-error and cost paths of one closed-loop run.
pub fn simulate_json(
    model_json: &str,
    horizon: usize,
    seed: u64,
    excitation: bool,
    wls: bool,
) -> Result<String, String> {
    let model = parse_model(model_json)?;
    let d = model.d();
    let mut cfg = SimConfig::new(model, horizon, seed);
    cfg.excitation_on = excitation;
    cfg.mode = mode(wls);
    let trace = sim::run(&cfg).map_err(|e| e.to_string())?;
    let paths = Paths {
        step: trace.records.iter().map(|r| r.step).collect(),
        x: (0..d).map(|i| trace.records.iter().map(|r| r.x[i]).collect()).collect(),
        theta_error: trace.records.iter().map(|r| r.theta_error).collect(),
        cost_gap: trace.records.iter().map(|r| (&r.cost - &r.delta_avg).trace()).collect(),
    };
    serde_json::to_string(&paths).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Histogram {
    coordinate: String,
    edges: Vec<f64>,
    counts: Vec<usize>,
    /// Expected counts under `N(0, 1)`.
    expected: Vec<f64>,
    mean: f64,
    variance: f64,
    ks: f64,
    failed_runs: usize,
}

/// Histogram of one coordinate of `√N Λ^{1/2}(θ̂_N − θ)Γ^{−1/2}` over
/// `runs` seeds, on `bins` equal cells of `[−4, 4]`.
pub fn clt_histogram_json(
    model_json: &str,
    runs: usize,
    horizon: usize,
    seed: u64,
    coordinate: usize,
    bins: usize,
    wls: bool,
) -> Result<String, String> {
    let model = parse_model(model_json)?;
    let mut sim_cfg = SimConfig::new(model, horizon, seed);
    sim_cfg.mode = mode(wls);
    let mut cfg = EnsembleConfig::new(sim_cfg, runs, seed);
    cfg.workers = 1;
    let summary = mc::run_ensemble(&cfg).map_err(|e| e.to_string())?;
    let stat = summary.coordinates.get(coordinate).ok_or_else(|| {
        format!(
            "coordinate {coordinate} out of range ({} available)",
            summary.coordinates.len()
        )
    })?;
    let bins = bins.max(1);
    let (lo, hi) = (-4.0, 4.0);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for row in &summary.z {
        let v = row[coordinate];
        if (lo..hi).contains(&v) {
            counts[((v - lo) / width) as usize] += 1;
        }
    }
    let m = summary.z.len() as f64;
    let expected = edges
        .windows(2)
        .map(|w| m * (mc::normal_cdf(w[1]) - mc::normal_cdf(w[0])))
        .collect();
    let hist = Histogram {
        coordinate: stat.name.clone(),
        edges,
        counts,
        expected,
        mean: stat.mean,
        variance: stat.variance,
        ks: stat.ks,
        failed_runs: summary.failures.len(),
    };
    serde_json::to_string(&hist).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn limit_matrix(model_json: &str) -> Result<String, JsValue> {
    limit_matrix_json(model_json).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate(model_json: &str, horizon: usize, seed: u32, excitation: bool, wls: bool) -> Result<String, JsValue> {
    simulate_json(model_json, horizon, seed as u64, excitation, wls).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn clt_histogram(
    model_json: &str,
    runs: usize,
    horizon: usize,
    seed: u32,
    coordinate: usize,
    bins: usize,
    wls: bool,
) -> Result<String, JsValue> {
    clt_histogram_json(model_json, runs, horizon, seed as u64, coordinate, bins, wls).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"{"d":2,"p":1,"q":1,
        "a":[[[2.0,0.0],[0.0,0.0]]],
        "b":[[[0.75,0.0],[0.0,-0.5]]],
        "gamma":[[1.0,0.0],[0.0,1.0]],
        "delta":[[1.0,0.0],[0.0,1.0]]}"#;

    #[test]
    fn limit_matrix_det() {
        let v: serde_json::Value = serde_json::from_str(&limit_matrix_json(MODEL).unwrap()).unwrap();
        let det = v["det_lambda"].as_f64().unwrap();
        assert!((det - 1885.0 / 21.0).abs() < 1e-9);
        assert_eq!(v["cross_check"]["pass"], true);
    }

    #[test]
    fn non_causal_model_is_an_error() {
        let bad = MODEL.replace("0.75", "1.5");
        assert!(limit_matrix_json(&bad).unwrap_err().contains("causal"));
    }

    #[test]
    fn bad_json_is_an_error() {
        assert!(limit_matrix_json("{").is_err());
        assert!(limit_matrix_json(&MODEL.replace("\"p\":1", "\"p\":2"))
            .unwrap_err()
            .contains("model.a"));
    }

    #[test]
    fn simulate_shapes() {
        let v: serde_json::Value = serde_json::from_str(&simulate_json(MODEL, 50, 3, true, false).unwrap()).unwrap();
        assert_eq!(v["step"].as_array().unwrap().len(), 50);
        assert_eq!(v["x"].as_array().unwrap().len(), 2);
        assert_eq!(v["theta_error"].as_array().unwrap().len(), 50);
    }

    #[test]
    fn histogram_counts() {
        let v: serde_json::Value =
            serde_json::from_str(&clt_histogram_json(MODEL, 20, 100, 1, 0, 16, false).unwrap()).unwrap();
        let counts: u64 = v["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum();
        assert!(counts <= 20);
        assert_eq!(v["edges"].as_array().unwrap().len(), 17);
        assert!(clt_histogram_json(MODEL, 5, 50, 1, 8, 10, false).is_err());
    }
}
