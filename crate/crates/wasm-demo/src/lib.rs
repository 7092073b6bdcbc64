//! WebAssembly bindings for the static demo page in `www/`.

use graffiti_core::codec::{encode_payload, generate_key, recover_from_page, wrap_page, ReplicaKey};
use graffiti_core::sim::{mean_series, run_sim, HazardModel};
use graffiti_core::sitehost::{PopulationSpec, Protection};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const NOTICE: &str = "This page holds an encrypted replica for a demo.";

#[derive(Serialize)]
pub struct Curves {
    pub days: Vec<u32>,
    pub total: Vec<f64>,
    pub anonymous: Vec<f64>,
    pub registration: Vec<f64>,
    pub puzzle: Vec<f64>,
}

/// Mean available fraction per day over `seeds` runs, overall and per class.
pub fn simulate_curves(anonymous: u32, registration: u32, puzzle: u32, days: u32, seeds: u32, hazard_scale: f64) -> Curves {
    let spec = PopulationSpec::with_counts(anonymous, registration, puzzle);
    let hazard = HazardModel::calibrated().scale_removal(hazard_scale.max(0.0));
    let runs: Vec<_> = (0..seeds.max(1) as u64).map(|s| run_sim(&spec, 1, &hazard, days.max(1), s)).collect();
    let class = |p: Protection| mean_series(&runs, move |r| r.by_protection[p as usize].available_fraction());
    Curves {
        days: runs[0].rows.iter().map(|r| r.day).collect(),
        total: mean_series(&runs, |r| r.total.available_fraction()),
        anonymous: class(Protection::Anonymous),
        registration: class(Protection::Registration),
        puzzle: class(Protection::Puzzle),
    }
}

#[derive(Serialize)]
pub struct EncodedPage {
    pub page: String,
    pub key: String,
    pub checksum: String,
    pub start_marker: String,
    pub end_marker: String,
}

/// Encrypts `text` under a key drawn from `seed` and wraps it as a wiki page.
pub fn encode_text(text: &str, seed: u64) -> Result<EncodedPage, String> {
    let key = generate_key(&mut ChaCha20Rng::seed_from_u64(seed));
    let payload = encode_payload(text.as_bytes(), &key).map_err(|e| e.to_string())?;
    let page = wrap_page(&payload, NOTICE, "").map_err(|e| e.to_string())?;
    Ok(EncodedPage {
        page,
        key: key.to_hex(),
        checksum: payload.plaintext_checksum,
        start_marker: payload.start_marker,
        end_marker: payload.end_marker,
    })
}

/// Recovers the text from an edited or intact page.
pub fn decode_text(page: &str, key: &str, checksum: &str, start: &str, end: &str) -> Result<String, String> {
    let key = ReplicaKey::from_hex(key).map_err(|e| e.to_string())?;
    let bytes = recover_from_page(page, &key, checksum, start, end).map_err(|e| e.to_string())?;
    String::from_utf8(bytes).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo types serialize")
}

#[wasm_bindgen]
pub fn simulate(anonymous: u32, registration: u32, puzzle: u32, days: u32, seeds: u32, hazard_scale: f64) -> String {
    to_json(&simulate_curves(anonymous, registration, puzzle, days, seeds, hazard_scale))
}

#[wasm_bindgen]
pub fn encode_page(text: &str, seed: u64) -> Result<String, JsError> {
    encode_text(text, seed).map(|p| to_json(&p)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn decode_page(page: &str, key: &str, checksum: &str, start: &str, end: &str) -> Result<String, JsError> {
    decode_text(page, key, checksum, start, end).map_err(|e| JsError::new(&e))
}
