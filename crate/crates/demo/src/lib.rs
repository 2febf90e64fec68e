//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Everything crosses the boundary as numbers or flat `f64` arrays; the
//! [`demo`] module holds the plain Rust versions used by the native tests.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: cthmm::Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.class()))
}

/// `P(Z(t) = k | Z(0) = 0)` for a left-to-right chain with the given forward
/// rates, on `points` evenly spaced times in `[0, horizon]`. Row-major,
/// `points × (rates.len() + 1)`.
#[wasm_bindgen]
pub fn transition_curves(rates: Vec<f64>, horizon: f64, points: usize) -> Result<Vec<f64>, JsError> {
    demo::transition_curves(&rates, horizon, points).map_err(js)
}

/// One Gillespie path of the same chain as `[t0, s0, t1, s1, ...]`.
#[wasm_bindgen]
pub fn sample_path(rates: Vec<f64>, horizon: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    demo::sample_path(&rates, horizon, seed as u64).map_err(js)
}

/// Progression rows of the demo mixture as
/// `[subtype, state, duration, heart_rate, systolic_bp, ...]`.
#[wasm_bindgen]
pub fn progression(subtypes: usize, states: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    demo::progression(subtypes, states, seed as u64).map_err(js)
}
