//! WebAssembly bindings for the static demo page. Every export takes plain
//! numbers or strings and returns a JSON document.

use serde_json::{json, Value};
use tokenfuse::analysis::value_histogram;
use tokenfuse::config::ScheduleConfig;
use tokenfuse::corpus::{evaluate, ngram_repetition, ClipRecord, MAX_REPETITION};
use tokenfuse::fuser::NormScale;
use tokenfuse::schedule::Parameterization;
use tokenfuse::textcond::TextSimulator;
use tokenfuse::DType;
use wasm_bindgen::prelude::*;

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// √ᾱ and log-SNR per step for the scaled-linear schedule, before and after
/// the zero-terminal-SNR rescale.
pub fn schedule_curves_json(steps: usize, beta_start: f64, beta_end: f64) -> Result<String, String> {
    let build = |zero_snr| {
        ScheduleConfig { steps, beta_start, beta_end, mode: Parameterization::V, zero_snr }
            .build()
            .map_err(|e| e.to_string())
    };
    let (base, rescaled) = (build(false)?, build(true)?);
    let curve = |s: &tokenfuse::schedule::NoiseSchedule| {
        let sqrt: Vec<f64> = s.sqrt_alpha_bars().to_vec();
        let log_snr: Vec<Value> = sqrt.iter().map(|a| finite_or_null((a * a / (1.0 - a * a)).ln())).collect();
        json!({ "sqrt_alpha_bar": sqrt, "log_snr": log_snr })
    };
    let t: Vec<usize> = (1..=steps).collect();
    Ok(json!({ "t": t, "base": curve(&base), "zero_snr": curve(&rescaled) }).to_string())
}

/// Value histograms of simulated encoder tokens, raw decoder tokens and
/// decoder tokens after a unit-scale layer norm.
pub fn token_histograms_json(prompt: &str, answer_seed: u64, bins: usize) -> Result<String, String> {
    let sim = TextSimulator::default();
    let err = |e: tokenfuse::Error| e.to_string();
    let encoder = sim.encode_encoder(prompt).map_err(err)?;
    let decoder = sim.bundle(prompt, answer_seed).and_then(|b| b.decoder_tokens()).map_err(err)?;
    let normed = NormScale::new(sim.d, 1.0, DType::F64).apply(&decoder).map_err(err)?;
    let mut out = serde_json::Map::new();
    for (name, t) in [("encoder", &encoder), ("decoder", &decoder), ("normed", &normed)] {
        let h = value_histogram(t, bins, (-3.0, 3.0)).map_err(err)?;
        let entry = json!({
            "edges": h.bin_edges, "counts": h.counts, "total": h.total,
            "within_half": h.mass_within(-0.5, 0.5), "outside_unit": h.count_outside(-1.0, 1.0),
        });
        out.insert(name.into(), entry);
    }
    Ok(Value::Object(out).to_string())
}

/// Runs one JSON record through every curation rule.
pub fn curate_record_json(line: &str) -> Result<String, String> {
    let record = ClipRecord::parse(line, 1).map_err(|e| e.to_string())?;
    let outcome = evaluate(&record);
    let caption = record.caption.as_deref().unwrap_or("");
    let rates: serde_json::Map<String, Value> =
        MAX_REPETITION.iter().map(|(n, limit, name)| {
            (name.to_string(), json!({ "rate": ngram_repetition(caption, *n), "limit": limit }))
        }).collect();
    Ok(json!({ "kept": outcome.kept, "stage": outcome.stage, "reason": outcome.reason, "repetition": rates }).to_string())
}

#[wasm_bindgen]
pub fn schedule_curves(steps: usize, beta_start: f64, beta_end: f64) -> Result<String, JsValue> {
    schedule_curves_json(steps, beta_start, beta_end).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn token_histograms(prompt: &str, answer_seed: u32, bins: usize) -> Result<String, JsValue> {
    token_histograms_json(prompt, u64::from(answer_seed), bins).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn curate_record(line: &str) -> Result<String, JsValue> {
    curate_record_json(line).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn ngram_rate(caption: &str, n: usize) -> f64 {
    ngram_repetition(caption, n.max(1))
}
