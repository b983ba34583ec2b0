//! Sampling the cluster law through the spine representation: a decorated
//! bridge conditioned to stay negative, whose early sampling times carry
//! fully simulated BBM copies that make up the cluster.

use std::f64::consts::SQRT_2;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drw::{decorated_copy, forward_pass, proposal_rng, CopyPruning, DecorationLaw, GRID_DT};
use crate::error::{input, Error, Result};
use crate::extremal::is_fat;
use crate::genealogy::PointMeasure;
use crate::harness::{read_jsonl, write_jsonl, Estimate};
use crate::rng::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuConfig {
    pub t_horizon: f64,
    /// Sampling times up to `r` contribute atoms.
    pub r: f64,
    /// Sampling times up to `s_exact` get a fully simulated decoration.
    pub s_exact: f64,
    /// Pruning of the decoration copies; `None` runs them unpruned.
    pub pruning: Option<CopyPruning>,
    /// Atoms below `-depth` are not kept.
    pub depth: f64,
    pub n_target: u64,
    /// Maximum proposals per accepted sample.
    pub budget: u64,
    pub grid_dt: f64,
    pub max_copy_population: usize,
    pub seed: u64,
}

impl Default for NuConfig {
    fn default() -> Self {
        Self {
            t_horizon: 512.0,
            r: 40.0,
            s_exact: 40.0,
            pruning: Some(CopyPruning::default()),
            depth: 8.0,
            n_target: 2000,
            budget: 1_000_000,
            grid_dt: GRID_DT,
            max_copy_population: 20_000_000,
            seed: 0,
        }
    }
}

impl NuConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if !(c.t_horizon > 0.0) || !(c.r >= 0.0) || !(c.r <= c.s_exact) || !(c.s_exact <= c.t_horizon) {
            return Err(Error::Config(format!(
                "need 0 <= r <= s_exact <= t_horizon, got r={}, s_exact={}, t_horizon={}",
                c.r, c.s_exact, c.t_horizon
            )));
        }
        if !(c.depth >= 0.0) || !(c.grid_dt > 0.0) || c.budget == 0 {
            return Err(Error::Config("depth >= 0, grid_dt > 0 and budget > 0 required".into()));
        }
        if let Some(p) = c.pruning {
            if !(p.b >= 0.0) || !(p.bulge >= 0.0) || !(p.dt > 0.0) {
                return Err(Error::Config(format!("invalid copy pruning {p:?}")));
            }
        }
        Ok(())
    }
}

/// `W-hat` on the grid `k * dt` for `k * dt <= t/2`, stored in single precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineSummary {
    pub dt: f64,
    pub what: Vec<f32>,
}

impl SpineSummary {
    /// Maximum over grid times in `[a, b]`.
    pub fn max_in(&self, a: f64, b: f64) -> Result<f64> {
        let span = (self.what.len().saturating_sub(1)) as f64 * self.dt;
        if !(a >= 0.0 && a <= b && b <= span + 1e-9) {
            return input(format!("window [{a}, {b}] outside the recorded span [0, {span}]"));
        }
        let lo = (a / self.dt).ceil() as usize;
        let hi = ((b / self.dt).floor() as usize).min(self.what.len() - 1);
        Ok((lo..=hi).map(|k| self.what[k] as f64).fold(f64::NEG_INFINITY, f64::max))
    }
}

/// One accepted draw from the (finite-horizon) cluster law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSample {
    pub seed: u64,
    pub index: u64,
    /// Proposals used, including the accepted one.
    pub proposals: u64,
    /// Sampling times `<= r`, with the path value there and the atoms each contributed.
    pub sigma_times: Vec<f64>,
    pub shifts: Vec<f64>,
    pub atoms_kept: Vec<usize>,
    pub cluster_atoms: PointMeasure,
    pub spine_path_summary: SpineSummary,
}

impl ClusterSample {
    #[inline]
    pub fn count(&self, v: f64) -> usize {
        self.cluster_atoms.count_at_least(-v)
    }
}

/// Offset of the tight first screening curve.
const SCREEN_B: f64 = 0.5;

enum Proposal {
    Rejected,
    Accepted(Box<ClusterSample>),
}

fn propose(cfg: &NuConfig, law: &dyn DecorationLaw, sample_seed: u64, j: u64) -> Result<Proposal> {
    let t = cfg.t_horizon;
    let mut rng = proposal_rng(sample_seed, j);
    let pass = forward_pass(t, 0.0, 0.0, Some(cfg.grid_dt), &[], law, cfg.s_exact, true, &mut rng);
    if !pass.completed {
        return Ok(Proposal::Rejected);
    }
    let path = pass.path;
    let copy_key = mix(mix(sample_seed, j), 0xC0B1);
    let copies: Vec<(u64, f64, f64)> = path
        .sigma_indices
        .iter()
        .enumerate()
        .map(|(k, &i)| (k as u64, path.times[i], path.what[i]))
        .take_while(|&(_, sigma, _)| sigma <= cfg.s_exact)
        .collect();
    let run = |k: u64, sigma: f64, shift: f64, depth: f64, pruning: Option<CopyPruning>| {
        decorated_copy(sigma, shift, depth, pruning, cfg.max_copy_population, mix(copy_key, k))
    };
    // Screen with max-only runs under progressively looser pruning. Each run
    // prunes a superset of the particles of every later run (same keyed
    // streams, lower curve), so an exceedance found early is final.
    let mut screens = vec![cfg.pruning];
    if let Some(p) = cfg.pruning {
        screens.insert(0, Some(CopyPruning { b: SCREEN_B.min(p.b), bulge: 0.0, dt: p.dt }));
    }
    for pruning in screens {
        for &(k, sigma, shift) in &copies {
            if run(k, sigma, shift, 0.0, pruning)?.exceeded {
                return Ok(Proposal::Rejected);
            }
        }
    }
    let mut atoms = vec![0.0];
    let (mut sigma_times, mut shifts, mut atoms_kept) = (vec![], vec![], vec![]);
    for &(k, sigma, shift) in copies.iter().filter(|c| c.1 <= cfg.r) {
        let copy = run(k, sigma, shift, cfg.depth, cfg.pruning)?;
        if copy.exceeded {
            return Ok(Proposal::Rejected);
        }
        sigma_times.push(sigma);
        shifts.push(shift);
        atoms_kept.push(copy.atoms.len());
        atoms.extend(copy.atoms);
    }
    let half = t / 2.0;
    let kmax = (half / cfg.grid_dt).floor() as usize;
    let mut what = Vec::with_capacity(kmax + 1);
    let mut pos = 0;
    for k in 0..=kmax {
        let s = k as f64 * cfg.grid_dt;
        pos += path.times[pos..].partition_point(|&u| u < s);
        what.push(path.what[pos] as f32);
    }
    Ok(Proposal::Accepted(Box::new(ClusterSample {
        seed: sample_seed,
        index: 0,
        proposals: j + 1,
        sigma_times,
        shifts,
        atoms_kept,
        cluster_atoms: PointMeasure::new(atoms),
        spine_path_summary: SpineSummary { dt: cfg.grid_dt, what },
    })))
}

/// Draw sample `index` of the pool defined by `cfg`.
pub fn sample_cluster(cfg: &NuConfig, law: &dyn DecorationLaw, index: u64) -> Result<ClusterSample> {
    sample_cluster_seeded(cfg, law, mix(cfg.seed, index), index)
}

/// Like [`sample_cluster`] with an explicit sample seed (`cfg.seed` is ignored).
pub fn sample_cluster_seeded(
    cfg: &NuConfig,
    law: &dyn DecorationLaw,
    sample_seed: u64,
    index: u64,
) -> Result<ClusterSample> {
    cfg.validate()?;
    law.validate()?;
    for j in 0..cfg.budget {
        if let Proposal::Accepted(mut s) = propose(cfg, law, sample_seed, j)? {
            s.index = index;
            return Ok(*s);
        }
    }
    Err(Error::Budget { budget: cfg.budget, accepted: 0 })
}

/// Samples `range` of the pool, in index order. Independent of thread count.
pub fn sample_pool_range(
    cfg: &NuConfig,
    law: &dyn DecorationLaw,
    range: std::ops::Range<u64>,
) -> Result<Vec<ClusterSample>> {
    cfg.validate()?;
    law.validate()?;
    range.into_par_iter().map(|i| sample_cluster(cfg, law, i)).collect()
}

pub fn sample_pool(cfg: &NuConfig, law: &dyn DecorationLaw) -> Result<Vec<ClusterSample>> {
    sample_pool_range(cfg, law, 0..cfg.n_target)
}

pub fn write_pool(pool: &[ClusterSample], w: impl Write) -> Result<()> {
    write_jsonl(pool, w)
}

pub fn read_pool(r: impl BufRead) -> Result<Vec<ClusterSample>> {
    read_jsonl(r)
}

/// Grow the pool file at `path` to `cfg.n_target` samples, `chunk` at a time,
/// keeping whatever a previous (possibly interrupted) run already wrote.
/// Samples already present must belong to `cfg`; a torn last line is dropped.
pub fn extend_pool_file(
    path: &std::path::Path,
    cfg: &NuConfig,
    law: &dyn DecorationLaw,
    chunk: u64,
    mut progress: impl FnMut(u64),
) -> Result<Vec<ClusterSample>> {
    cfg.validate()?;
    let mut pool: Vec<ClusterSample> = Vec::new();
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            match serde_json::from_str::<ClusterSample>(line) {
                Ok(s) => pool.push(s),
                Err(_) => break,
            }
        }
        for (i, s) in pool.iter().enumerate() {
            if s.index != i as u64 || s.seed != mix(cfg.seed, i as u64) {
                return Err(Error::Config(format!("{} holds samples of a different pool", path.display())));
            }
        }
        pool.truncate(cfg.n_target as usize);
        let mut f = std::fs::File::create(path)?;
        write_pool(&pool, &mut f)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut next = pool.len() as u64;
    while next < cfg.n_target {
        let end = (next + chunk.max(1)).min(cfg.n_target);
        let batch = sample_pool_range(cfg, law, next..end)?;
        write_pool(&batch, &mut f)?;
        f.flush()?;
        pool.extend(batch);
        next = end;
        progress(next);
    }
    Ok(pool)
}

/// Acceptance statistics of a pool.
pub fn acceptance_rate(pool: &[ClusterSample]) -> Estimate {
    let proposals: u64 = pool.iter().map(|s| s.proposals).sum();
    Estimate::proportion(pool.len() as u64, proposals)
}

fn check_v(v: f64) -> Result<()> {
    if !(v >= 0.0) {
        return input(format!("level v must be >= 0, got {v}"));
    }
    Ok(())
}

/// `E C([-v, 0])`.
pub fn estimate_cluster_mean(v: f64, samples: &[ClusterSample]) -> Result<Estimate> {
    check_v(v)?;
    Ok(Estimate::from_samples(samples.iter().map(|s| s.count(v) as f64)))
}

/// `P(C([-v,0]) > delta v e^{sqrt2 v})`.
pub fn estimate_fat_prob(v: f64, delta: f64, samples: &[ClusterSample]) -> Result<Estimate> {
    check_v(v)?;
    let hits = samples.iter().filter(|s| is_fat(s.count(v), delta, v)).count() as u64;
    Ok(Estimate::proportion(hits, samples.len() as u64))
}

/// `E(C([-v,0]); not fat) / e^{sqrt2 v}`.
pub fn estimate_truncated_mean(v: f64, delta: f64, samples: &[ClusterSample]) -> Result<Estimate> {
    check_v(v)?;
    let norm = (SQRT_2 * v).exp();
    Ok(Estimate::from_samples(samples.iter().map(|s| {
        let c = s.count(v);
        if is_fat(c, delta, v) {
            0.0
        } else {
            c as f64 / norm
        }
    })))
}

/// Raw and normalized (by `(v+1) e^{2 sqrt2 v}`) second moment.
pub fn second_moment(v: f64, samples: &[ClusterSample]) -> Result<(Estimate, Estimate)> {
    check_v(v)?;
    let raw = Estimate::from_samples(samples.iter().map(|s| (s.count(v) as f64).powi(2)));
    Ok((raw, raw.scale(1.0 / ((v + 1.0) * (2.0 * SQRT_2 * v).exp()))))
}

/// Whether `max_{s in [eta v^2, v^2/eta]} W-hat_s > -M` along the spine.
pub fn spine_event_b(sample: &ClusterSample, v: f64, eta: f64, big_m: f64) -> Result<bool> {
    if !(v > 0.0) || !(eta > 0.0 && eta <= 1.0) {
        return input(format!("spine event needs v > 0 and eta in (0,1], got v={v}, eta={eta}"));
    }
    let max = sample.spine_path_summary.max_in(eta * v * v, v * v / eta)?;
    Ok(max > -big_m)
}

pub fn estimate_spine_event(samples: &[ClusterSample], v: f64, eta: f64, big_m: f64) -> Result<Estimate> {
    let mut hits = 0u64;
    for s in samples {
        hits += spine_event_b(s, v, eta, big_m)? as u64;
    }
    Ok(Estimate::proportion(hits, samples.len() as u64))
}

/// Cluster counts split by the spine event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FatGivenB {
    /// `E(C([-v,0]); B^c) / e^{sqrt2 v}`.
    pub off_event: Estimate,
    /// `E(C([-v,0]) | B) / (v e^{sqrt2 v})`.
    pub on_event: Estimate,
    /// `E C([-v,0]) / e^{sqrt2 v}`.
    pub full: Estimate,
    pub p_event: Estimate,
    /// `E(C([-v,0]); B) / e^{sqrt2 v}`, so that `full = off_event + on_event_part`.
    pub on_event_part: Estimate,
}

pub const MIN_EVENT_SAMPLES: usize = 10;

pub fn fat_given_b_diagnostic(
    samples: &[ClusterSample],
    v: f64,
    eta: f64,
    big_m: f64,
) -> Result<FatGivenB> {
    let norm = (SQRT_2 * v).exp();
    let mut flagged = Vec::with_capacity(samples.len());
    for s in samples {
        flagged.push((s.count(v) as f64 / norm, spine_event_b(s, v, eta, big_m)?));
    }
    let n_event = flagged.iter().filter(|f| f.1).count();
    if n_event < MIN_EVENT_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{n_event} samples on the spine event (need {MIN_EVENT_SAMPLES})"
        )));
    }
    let off = Estimate::from_samples(flagged.iter().map(|&(c, b)| if b { 0.0 } else { c }));
    let part = Estimate::from_samples(flagged.iter().map(|&(c, b)| if b { c } else { 0.0 }));
    let on = Estimate::from_samples(flagged.iter().filter(|f| f.1).map(|&(c, _)| c / v));
    Ok(FatGivenB {
        off_event: off,
        on_event: on,
        full: Estimate::from_samples(flagged.iter().map(|f| f.0)),
        p_event: Estimate::proportion(n_event as u64, samples.len() as u64),
        on_event_part: part,
    })
}

/// Means of `C([-v,0])` from two pools (e.g. two horizons) side by side.
pub fn stability_report(
    a: &[ClusterSample],
    b: &[ClusterSample],
    vs: &[f64],
) -> Result<Vec<(f64, Estimate, Estimate)>> {
    vs.iter()
        .map(|&v| Ok((v, estimate_cluster_mean(v, a)?, estimate_cluster_mean(v, b)?)))
        .collect()
}
