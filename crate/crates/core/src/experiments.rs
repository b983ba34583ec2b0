//! Replicable experiments behind the command line: each replicate turns one
//! seed into a handful of named statistics.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bbm::{centering, simulate, BbmConfig, Pruning};
use crate::cluster_law::{sample_cluster_seeded, spine_event_b, ClusterSample, NuConfig};
use crate::drw::{sample_drw, DecorationLaw, GRID_DT};
use crate::error::{Error, Result};
use crate::extremal::structured_process;
use crate::genealogy::PointMeasure;
use crate::harness::{Experiment, Outcome, Params};
use crate::limit::{sample_structured_limit, LimitConfig};

/// Experiment names understood by the command line.
pub const EXPERIMENTS: [&str; 5] = ["simulate", "extremal", "drw", "cluster-law", "limit"];

/// Parse a parameter map into a typed config, rejecting unknown keys.
pub fn parse_params<T: DeserializeOwned>(params: &Params) -> Result<T> {
    let obj = serde_json::Value::Object(params.clone().into_iter().collect());
    serde_json::from_value(obj).map_err(|e| Error::Config(e.to_string()))
}

/// Parse `extra` keys into `E` and the remaining keys into `T`.
fn parse_split<T: DeserializeOwned, E: DeserializeOwned>(params: &Params, extra: &[&str]) -> Result<(T, E)> {
    let (mine, rest): (Params, Params) = params.clone().into_iter().partition(|(k, _)| extra.contains(&k.as_str()));
    Ok((parse_params(&rest)?, parse_params(&mine)?))
}

fn key(prefix: &str, v: f64) -> String {
    format!("{prefix}_v{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    pub horizon_t: f64,
    pub pruning: Pruning,
    pub max_population: usize,
    /// Levels `v` at which `#{h - m_t >= -v}` is reported.
    pub levels: Vec<f64>,
}

impl Default for SimulateParams {
    fn default() -> Self {
        Self { horizon_t: 10.0, pruning: Pruning::Off, max_population: 50_000_000, levels: vec![0.0, 1.0, 2.0] }
    }
}

impl SimulateParams {
    fn bbm(&self, seed: u64) -> BbmConfig {
        BbmConfig {
            horizon_t: self.horizon_t,
            branch_rate: 1.0,
            pruning: self.pruning,
            max_population: self.max_population,
            seed,
        }
    }
}

pub struct Simulate;

impl Experiment for Simulate {
    fn name(&self) -> &'static str {
        "simulate"
    }

    fn replicate(&self, params: &Params, seed: u64) -> Result<Outcome> {
        let p: SimulateParams = parse_params(params)?;
        let pop = simulate(&p.bbm(seed))?;
        let mut out = Outcome::default();
        out.stat("size", pop.size() as f64).stat("z", pop.derivative_martingale(1.0));
        out.flag("pruned", pop.pruned_count as u64);
        if pop.size() > 0 {
            out.stat("centered_max", pop.centered_max()?);
            let e = pop.centered_heights()?;
            for &v in &p.levels {
                out.stat(&key("level", v), e.count_at_least(-v) as f64);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtremalParams {
    pub horizon_t: f64,
    /// Genealogical radius; `t/2` when absent.
    pub r: Option<f64>,
    pub pruning: Pruning,
    pub max_population: usize,
    pub v: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl Default for ExtremalParams {
    fn default() -> Self {
        Self {
            horizon_t: 10.0,
            r: None,
            pruning: Pruning::default(),
            max_population: 50_000_000,
            v: 2.0,
            alpha: 0.5,
            delta: 0.05,
        }
    }
}

pub struct Extremal;

impl Experiment for Extremal {
    fn name(&self) -> &'static str {
        "extremal"
    }

    fn replicate(&self, params: &Params, seed: u64) -> Result<Outcome> {
        let p: ExtremalParams = parse_params(params)?;
        let cfg = BbmConfig {
            horizon_t: p.horizon_t,
            branch_rate: 1.0,
            pruning: p.pruning,
            max_population: p.max_population,
            seed,
        };
        let pop = simulate(&cfg)?;
        let sp = structured_process(&pop, p.r.unwrap_or(p.horizon_t / 2.0))?;
        let mut out = Outcome::default();
        out.stat("local_maxima", sp.len() as f64)
            .stat("level_count", pop.heights().filter(|&h| h - centering(p.horizon_t) >= -p.v).count() as f64)
            .stat("flat_count", sp.restricted_count(p.v, -p.v, None) as f64)
            .stat("star_count", sp.star_restricted_count(-p.v, None) as f64);
        let r = sp.theorem_ratios(p.v, p.alpha, p.delta);
        for (name, x) in [("ratio_159", r.ratio_159), ("ratio_158", r.ratio_158), ("ratio_37", r.ratio_37)] {
            match x {
                Some(x) => {
                    out.stat(name, x);
                }
                None => {
                    out.flag(&format!("undefined_{name}"), 1);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrwParams {
    pub t: f64,
    pub v: f64,
    pub w: f64,
    pub grid_dt: f64,
}

impl Default for DrwParams {
    fn default() -> Self {
        Self { t: 64.0, v: 0.0, w: 0.0, grid_dt: GRID_DT }
    }
}

pub struct Drw {
    pub law: Arc<dyn DecorationLaw + Send>,
}

impl Experiment for Drw {
    fn name(&self) -> &'static str {
        "drw"
    }

    fn replicate(&self, params: &Params, seed: u64) -> Result<Outcome> {
        let p: DrwParams = parse_params(params)?;
        let path = sample_drw(p.t, p.v, p.w, self.law.as_ref(), p.grid_dt, seed)?;
        let mut out = Outcome::default();
        out.stat("stay_negative", path.stay_negative as u8 as f64)
            .stat("sigma_count", path.sigma_indices.len() as f64)
            .stat("max_what", path.what.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        Ok(out)
    }
}

/// A cluster-law config plus the levels to report.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub nu: NuConfig,
    pub levels: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Levels {
    #[serde(default = "cluster_levels")]
    levels: Vec<f64>,
}

fn cluster_levels() -> Vec<f64> {
    vec![2.0, 3.0, 4.0, 5.0, 6.0]
}

impl ClusterParams {
    pub fn parse(params: &Params) -> Result<Self> {
        let (nu, Levels { levels }) = parse_split(params, &["levels"])?;
        Ok(Self { nu, levels })
    }
}

pub struct ClusterLaw {
    pub law: Arc<dyn DecorationLaw + Send>,
}

impl Experiment for ClusterLaw {
    fn name(&self) -> &'static str {
        "cluster-law"
    }

    fn replicate(&self, params: &Params, seed: u64) -> Result<Outcome> {
        let p = ClusterParams::parse(params)?;
        let s = sample_cluster_seeded(&p.nu, self.law.as_ref(), seed, 0)?;
        Ok(cluster_outcome(&s, &p.levels))
    }
}

/// Statistics of one cluster sample, as recorded by the cluster-law experiment.
pub fn cluster_outcome(s: &ClusterSample, levels: &[f64]) -> Outcome {
    let mut out = Outcome::default();
    out.stat("atoms", s.cluster_atoms.total() as f64).flag("proposals", s.proposals);
    for &v in levels {
        out.stat(&key("count", v), s.count(v) as f64);
        if let Ok(b) = spine_event_b(s, v, 0.2, 1.0) {
            out.stat(&key("spine_b", v), b as u8 as f64);
        }
    }
    out
}

/// A limit config plus the levels and fat parameters to report.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitParams {
    pub limit: LimitConfig,
    pub levels: Vec<f64>,
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LimitExtra {
    levels: Vec<f64>,
    alpha: f64,
    delta: f64,
}

impl Default for LimitExtra {
    fn default() -> Self {
        Self { levels: vec![0.0, 1.0, 2.0, 4.0, 6.0, 8.0], alpha: 0.5, delta: 0.05 }
    }
}

impl LimitParams {
    pub fn parse(params: &Params) -> Result<Self> {
        let (limit, e): (LimitConfig, LimitExtra) = parse_split(params, &["levels", "alpha", "delta"])?;
        Ok(Self { limit, levels: e.levels, alpha: e.alpha, delta: e.delta })
    }
}

pub struct Limit {
    pub pool: Arc<Vec<Arc<PointMeasure>>>,
}

impl Experiment for Limit {
    fn name(&self) -> &'static str {
        "limit"
    }

    fn replicate(&self, params: &Params, seed: u64) -> Result<Outcome> {
        let p = LimitParams::parse(params)?;
        let cfg = LimitConfig { seed, ..p.limit.clone() };
        let d = sample_structured_limit(&cfg, &self.pool, 0)?;
        let mut out = Outcome::default();
        out.stat("z", d.z).stat("pairs", d.process.len() as f64);
        for &v in p.levels.iter().filter(|&&v| v <= cfg.v_max) {
            let e = (SQRT_2 * v).exp();
            out.stat(&key("star", v), d.process.star_restricted_count(-v, None) as f64);
            if v > 0.0 {
                let r = d.process.theorem_ratios(v, p.alpha, p.delta);
                out.stat(&key("flat_ratio", v), d.process.restricted_count(v, -v, None) as f64 / (d.z.max(f64::MIN_POSITIVE) * v * e));
                match r.ratio_159 {
                    Some(x) => out.stat(&key("ratio_159", v), x),
                    None => out.flag(&key("undefined_ratio_159", v), 1),
                };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drw::FixedDecoration;
    use crate::harness::run;

    fn params(json: &str) -> Params {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_params::<SimulateParams>(&params(r#"{"horizon": 3}"#)).is_err());
        let p: SimulateParams = parse_params(&params(r#"{"horizon_t": 3}"#)).unwrap();
        assert_eq!(p.horizon_t, 3.0);
        let c = ClusterParams::parse(&params(r#"{"t_horizon": 64, "levels": [1]}"#)).unwrap();
        assert_eq!((c.nu.t_horizon, c.levels), (64.0, vec![1.0]));
        assert!(ClusterParams::parse(&params(r#"{"t_horizons": 64}"#)).is_err());
        assert!(LimitParams::parse(&params(r#"{"v_max": 4, "alpha": 0.3}"#)).is_ok());
        assert!(LimitParams::parse(&params(r#"{"v_max": 4, "beta": 0.3}"#)).is_err());
    }

    #[test]
    fn simulate_records_sizes() {
        let recs = run(&Simulate, &params(r#"{"horizon_t": 2}"#), 50, 3);
        assert_eq!(recs.len(), 50);
        assert!(recs.iter().all(|r| r.error.is_none() && r.stats["size"] >= 1.0));
        let bad = run(&Simulate, &params(r#"{"horizon_t": -1}"#), 2, 3);
        assert!(bad.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn extremal_and_drw_run() {
        let recs = run(&Extremal, &params(r#"{"horizon_t": 4, "v": 1}"#), 10, 1);
        assert!(recs.iter().all(|r| r.error.is_none() && r.stats["local_maxima"] >= 1.0));
        let drw = Drw { law: Arc::new(FixedDecoration(f64::NEG_INFINITY)) };
        let recs = run(&drw, &params(r#"{"t": 8}"#), 10, 1);
        assert!(recs.iter().all(|r| r.stats["stay_negative"] == 1.0 && r.stats["sigma_count"] >= 0.0));
    }

    #[test]
    fn limit_runs_on_a_singleton_pool() {
        let lim = Limit { pool: Arc::new(vec![Arc::new(PointMeasure::new(vec![0.0]))]) };
        let recs = run(&lim, &params(r#"{"v_max": 2, "levels": [0, 1, 2]}"#), 20, 4);
        for r in &recs {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.stats["star_v2"] == r.stats["pairs"]);
        }
    }
}
