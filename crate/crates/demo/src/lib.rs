//! Browser bindings: simulate a BBM, extract its clusters, and draw a
//! decorated random walk path. Each binding returns a JSON string.

use bbm_core::bbm::{simulate, BbmConfig, Pruning};
use bbm_core::drw::{sample_drw, FixedDecoration};
use bbm_core::extremal::structured_process;
use bbm_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest horizon the page may ask for; populations grow like `e^t`.
pub const MAX_T: f64 = 11.0;
const MAX_POPULATION: usize = 2_000_000;

#[derive(Debug, Serialize)]
pub struct Frontier {
    pub t: f64,
    /// Heights minus the centering `m(t)`, descending.
    pub heights: Vec<f64>,
    pub z: f64,
}

#[derive(Debug, Serialize)]
pub struct Pair {
    pub u: f64,
    pub cluster: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Clusters {
    pub t: f64,
    pub r: f64,
    pub pairs: Vec<Pair>,
}

#[derive(Debug, Serialize)]
pub struct Walk {
    pub times: Vec<f64>,
    pub what: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// `W-hat` plus decoration at each sampling time.
    pub marks: Vec<f64>,
    pub stay_negative: bool,
}

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= MAX_T) {
        return Err(bbm_core::Error::Input(format!("t must lie in (0, {MAX_T}], got {t}")));
    }
    Ok(())
}

fn population(t: f64, seed: u32) -> Result<bbm_core::bbm::Population> {
    check_t(t)?;
    simulate(&BbmConfig {
        horizon_t: t,
        branch_rate: 1.0,
        pruning: Pruning::Off,
        max_population: MAX_POPULATION,
        seed: seed as u64,
    })
}

pub fn frontier(t: f64, seed: u32) -> Result<Frontier> {
    let pop = population(t, seed)?;
    let mut heights = pop.centered_heights()?.atoms().to_vec();
    heights.reverse();
    Ok(Frontier { t, heights, z: pop.derivative_martingale(1.0) })
}

/// Local maxima within genealogical distance `r` and their clusters, highest first.
pub fn clusters(t: f64, r: f64, seed: u32) -> Result<Clusters> {
    let pop = population(t, seed)?;
    let sp = structured_process(&pop, r)?;
    let mut pairs: Vec<Pair> =
        sp.pairs.iter().map(|p| Pair { u: p.u, cluster: p.cluster.atoms().iter().rev().copied().collect() }).collect();
    pairs.sort_by(|a, b| b.u.total_cmp(&a.u));
    Ok(Clusters { t, r, pairs })
}

/// A path from 0 to 0 with every decoration fixed at `decoration`.
pub fn walk(t: f64, decoration: f64, seed: u32) -> Result<Walk> {
    if !(t > 0.0 && t <= 4096.0) {
        return Err(bbm_core::Error::Input(format!("t must lie in (0, 4096], got {t}")));
    }
    let dt = (t / 1000.0).max(0.05);
    let p = sample_drw(t, 0.0, 0.0, &FixedDecoration(decoration), dt, seed as u64)?;
    let sigmas: Vec<f64> = p.sigmas().collect();
    let marks = p.sigma_indices.iter().zip(&p.decorations).map(|(&i, d)| p.what[i] + d).collect();
    Ok(Walk { times: p.times, what: p.what, sigmas, marks, stay_negative: p.stay_negative })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = frontier)]
pub fn frontier_js(t: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(frontier(t, seed))
}

#[wasm_bindgen(js_name = clusters)]
pub fn clusters_js(t: f64, r: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(clusters(t, r, seed))
}

#[wasm_bindgen(js_name = walk)]
pub fn walk_js(t: f64, decoration: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(walk(t, decoration, seed))
}
