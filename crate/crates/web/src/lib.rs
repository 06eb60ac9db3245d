//! Browser bindings: three operations returning JSON strings.

use dlmlab::support::SupportOracle;
use dlmlab::theory::{
    default_edits, example_multiplicative_vs_tv, verify_rate_separation, RateTolerances,
};
use dlmlab::{ExplicitDistribution, Instance, LanguageSpec, Mechanism, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Serialize)]
struct RateRow {
    state: String,
    h: usize,
    y: u16,
    delta_d: i8,
    target_exponent: f64,
    fitted_exponent: Option<f64>,
    scores: Vec<f64>,
    passed: bool,
}

#[derive(Serialize)]
struct RateCurves {
    sigma_grid: Vec<f64>,
    steps: Vec<usize>,
    rows: Vec<RateRow>,
}

/// Normalized scores of every default edit over a noise grid, with fitted
/// log-log slopes. `instance` is an explicit distribution in JSON.
pub fn rate_curves_json(instance: &str, mechanism: &str, sigma_grid: &[f64]) -> Result<String> {
    let dist = ExplicitDistribution::from_json(instance)?;
    let mechanism: Mechanism = mechanism.parse()?;
    let edits = default_edits(&dist, mechanism);
    let report = verify_rate_separation(
        &dist,
        mechanism,
        sigma_grid,
        0.25,
        &edits,
        RateTolerances::default(),
    )?;
    let rows = report
        .edits
        .iter()
        .map(|e| RateRow {
            state: e.state.to_string(),
            h: e.h,
            y: e.y,
            delta_d: e.delta_d,
            target_exponent: e.target_exponent,
            fitted_exponent: e.fitted_exponent,
            scores: e.scores.clone(),
            passed: e.passed(),
        })
        .collect();
    Ok(serde_json::to_string(&RateCurves {
        sigma_grid: report.sigma_grid,
        steps: report.steps,
        rows,
    })?)
}

#[derive(Serialize)]
struct WalkSample {
    sequence: Vec<u16>,
    prob: f64,
    in_support: bool,
}

/// Strings from the walk language with their probabilities.
pub fn walk_samples_json(k: usize, h: usize, count: usize, seed: u64) -> Result<String> {
    let lang = LanguageSpec::new(k, h)?;
    let inst = Instance::Walk(lang.clone());
    let out: Vec<WalkSample> = lang
        .sample_corpus(count, seed)
        .into_iter()
        .map(|s| WalkSample {
            prob: lang.prob(&s),
            in_support: inst.contains_clean(&s),
            sequence: s.to_vec(),
        })
        .collect();
    Ok(serde_json::to_string(&out)?)
}

/// Two-point laws whose score ratio is bounded while total variation is not small.
pub fn distortion_example_json(sigma: f64, alpha: f64) -> Result<String> {
    Ok(serde_json::to_string(&example_multiplicative_vs_tv(
        sigma, alpha,
    )?)?)
}

#[wasm_bindgen]
pub fn rate_curves(
    instance: &str,
    mechanism: &str,
    sigma_grid: Vec<f64>,
) -> std::result::Result<String, JsError> {
    to_js(rate_curves_json(instance, mechanism, &sigma_grid))
}

#[wasm_bindgen]
pub fn walk_samples(
    k: usize,
    h: usize,
    count: usize,
    seed: u64,
) -> std::result::Result<String, JsError> {
    to_js(walk_samples_json(k, h, count, seed))
}

#[wasm_bindgen]
pub fn distortion_example(sigma: f64, alpha: f64) -> std::result::Result<String, JsError> {
    to_js(distortion_example_json(sigma, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAIR: &str = r#"{"K":2,"H":2,"support":[[1,1],[2,2]],"prob":[0.75,0.25]}"#;

    #[test]
    fn rate_curves_fit() {
        let v: serde_json::Value = serde_json::from_str(
            &rate_curves_json(PAIR, "uniform", &[0.2, 0.1, 0.05, 0.02, 0.01]).unwrap(),
        )
        .unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r["passed"] == true));
        assert_eq!(v["steps"][4], 40_000);
    }

    #[test]
    fn walk_samples_are_in_support() {
        let v: serde_json::Value =
            serde_json::from_str(&walk_samples_json(8, 6, 5, 1).unwrap()).unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows
            .iter()
            .all(|r| r["in_support"] == true && r["prob"].as_f64().unwrap() > 0.0));
        assert_eq!(
            walk_samples_json(8, 6, 5, 1).unwrap(),
            walk_samples_json(8, 6, 5, 1).unwrap()
        );
    }

    #[test]
    fn distortion_example_values() {
        let v: serde_json::Value =
            serde_json::from_str(&distortion_example_json(1e-4, 0.25).unwrap()).unwrap();
        assert!((v["distortion"].as_f64().unwrap() - 10.0).abs() < 1e-9);
        assert!((v["tv"].as_f64().unwrap() - 0.44991).abs() < 1e-4);
        assert!(rate_curves_json("{", "uniform", &[0.1]).is_err());
        assert!(rate_curves_json(PAIR, "sideways", &[0.2, 0.1, 0.05]).is_err());
    }
}
